"""
Dual Semantic-Visual Transformer Module
=======================================
The instance-motivated semantic encoder (IMSE) adapts the shared attribute
prototypes to one image; the semantic-motivated instance decoder (SMID) adapts
the image's patch features to the adapted prototypes.

Shapes: prototypes S[N_s×D], patch features F[N_v×D], affinities M[N_s×N_v].
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from . import numcore as nc
from .config import DsvtmConfig
from .layers import MLP, LayerNorm, Linear, Module, ModuleList, attention_scores, uniform_init
from .numcore import Parameter, Tensor

logger = logging.getLogger(__name__)


@dataclass
class DsvtmState:
    """Everything one DSVTM forward pass produces."""

    f_hat: Tensor                                          # F̂ [N_v×D]
    s_hats: List[Tensor] = field(default_factory=list)     # Ŝ after each loop [N_s×D]
    affinities: List[Tensor] = field(default_factory=list)  # M after each loop [N_s×N_v]

    @property
    def s_final(self) -> Optional[Tensor]:
        return self.s_hats[-1] if self.s_hats else None


def semantic_alignment_loss(m: Tensor, a_y) -> Tensor:
    """Squared distance between the patch-pooled affinity and the class prototype."""
    pooled = nc.gmp(m, axis=1)
    diff = nc.sub(pooled, a_y)
    return nc.sum_all(nc.square(diff))


class InstanceMotivatedSemanticEncoder(Module):
    """One IMSE pass: instance-aware semantic attention, then attribute
    communication (group gate) and activation."""

    def __init__(self, rng: np.random.Generator, config: DsvtmConfig):
        super().__init__()
        d = config.width
        self.config = config
        self.ln_s = LayerNorm(d, config.ln_eps)
        self.ln_f = LayerNorm(d, config.ln_eps)
        self.q = Linear(rng, d, d)
        self.k = Linear(rng, d, d)
        self.v = Linear(rng, d, d)
        self.w_p1 = Parameter(uniform_init(rng, config.num_attributes, (config.num_attributes, config.group_width)))
        self.w_p2 = Parameter(uniform_init(rng, config.group_width, (config.group_width, config.num_attributes)))
        self.mlp = MLP(rng, d, config.mlp_ratio)

    def attention(self, s_in: Tensor, f: Tensor, residual_base: Tensor) -> Tuple[Tensor, Tensor]:
        """Affinity M[N_s×N_v] and instance-related prototypes softmax(M)·v(LN(F)) + base."""
        f_norm = self.ln_f(f)
        m = attention_scores(self.q(self.ln_s(s_in)), self.k(f_norm), _scale(self.config))
        s_attr = nc.add(nc.matmul(nc.softmax_rows(m), self.v(f_norm)), residual_base)
        return m, s_attr

    def group_gate(self, s_attr: Tensor) -> Tensor:
        """Per-attribute gate from the width-pooled prototypes; rows keep their direction."""
        pooled = nc.gmp(s_attr, axis=1)
        gate = nc.sigmoid(nc.matmul(nc.gelu(nc.matmul(pooled, self.w_p1)), self.w_p2))
        return nc.add(nc.scale_rows(s_attr, gate), s_attr)

    def activate(self, s_bar: Tensor, s_attr: Tensor) -> Tensor:
        return nc.add(nc.add(self.mlp(s_bar), s_bar), s_attr)

    def __call__(self, s_in: Tensor, f: Tensor, residual_base: Tensor) -> Tuple[Tensor, Tensor]:
        m, s_attr = self.attention(s_in, f, residual_base)
        if not self.config.use_aca:
            return s_attr, m
        s_bar = self.group_gate(s_attr)
        return self.activate(s_bar, s_attr), m


class SemanticMotivatedInstanceDecoder(Module):
    """Semantic-related instance attention, patch mixing and patch activation."""

    def __init__(self, rng: np.random.Generator, config: DsvtmConfig):
        super().__init__()
        d, n_v, n_h = config.width, config.num_patches, config.patch_hidden
        self.config = config
        self.ln_f = LayerNorm(d, config.ln_eps)
        self.ln_s = LayerNorm(d, config.ln_eps)
        self.q = Linear(rng, d, d)
        self.k = Linear(rng, d, d)
        self.v = Linear(rng, d, d)
        # Inverted residual over the patch axis with a linear bottleneck
        self.w_e = Parameter(uniform_init(rng, n_v, (n_v, n_h)))
        self.w_s = Parameter(uniform_init(rng, n_h, (n_h, n_h)))
        self.w_n = Parameter(uniform_init(rng, n_h, (n_h, n_v)))
        self.mlp = MLP(rng, d, config.mlp_ratio)

    def attention(self, f: Tensor, s_hat: Tensor) -> Tensor:
        s_norm = self.ln_s(s_hat)
        m_bar = attention_scores(self.q(self.ln_f(f)), self.k(s_norm), _scale(self.config))
        return nc.add(nc.matmul(nc.softmax_rows(m_bar), self.v(s_norm)), f)

    def patch_mixing(self, f_tilde: Tensor) -> Tensor:
        expanded = nc.gelu(nc.matmul(nc.transpose(f_tilde), self.w_e))
        selected = nc.gelu(nc.matmul(expanded, self.w_s))
        narrowed = nc.matmul(selected, self.w_n)   # no activation
        return nc.add(nc.transpose(narrowed), f_tilde)

    def patch_activate(self, f_bar: Tensor) -> Tensor:
        return nc.add(self.mlp(f_bar), f_bar)

    def __call__(self, f: Tensor, s_hat: Tensor) -> Tensor:
        out = self.attention(f, s_hat) if self.config.use_smid_attention else f
        if self.config.use_patch_mixing:
            out = self.patch_activate(self.patch_mixing(out))
        return out


class DSVTM(Module):
    """R recurrent IMSE loops followed by one SMID pass."""

    def __init__(self, rng: np.random.Generator, config: DsvtmConfig):
        super().__init__()
        self.config = config
        owners = 1 if config.share_loop_weights else config.loops
        self.imse = ModuleList(InstanceMotivatedSemanticEncoder(rng, config) for _ in range(owners))
        self.smid = SemanticMotivatedInstanceDecoder(rng, config)

    def encoder_for_loop(self, r: int) -> InstanceMotivatedSemanticEncoder:
        return self.imse[0 if self.config.share_loop_weights else r]

    def encode(self, s0: Tensor, f: Tensor) -> Tuple[Tensor, List[Tensor], List[Tensor]]:
        """Run the R IMSE loops; each loop reads the previous loop's output."""
        s_current = s0
        s_hats, affinities = [], []
        for r in range(self.config.loops):
            base = s0 if self.config.anchor_to_shared else s_current
            s_current, m = self.encoder_for_loop(r)(s_current, f, base)
            s_hats.append(s_current)
            affinities.append(m)
        return s_current, s_hats, affinities

    def __call__(self, f: Tensor, s_in: Tensor) -> DsvtmState:
        if self.config.use_imse:
            s_final, s_hats, affinities = self.encode(s_in, f)
        else:
            s_final, s_hats, affinities = s_in, [], []
        f_hat = self.smid(f, s_final)
        return DsvtmState(f_hat=f_hat, s_hats=s_hats if s_hats else [s_final], affinities=affinities)


def _scale(config: DsvtmConfig) -> Optional[float]:
    return 1.0 / np.sqrt(config.width) if config.attn_scale else None
