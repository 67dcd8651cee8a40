"""
Toy Backbone
============
A small trainable patch encoder standing in for a pretrained vision
transformer: linear patch embedding, a learned positional term and L pre-norm
single-head self-attention blocks. DSVTMs are inserted after the last Z layers.
"""

import logging
from typing import List, Sequence, Tuple

import numpy as np

from . import numcore as nc
from .config import BackboneConfig, DsvtmConfig
from .dsvtm import DSVTM, DsvtmState
from .errors import ContractError, ShapeError
from .layers import MLP, LayerNorm, Linear, Module, ModuleList, attention_scores, uniform_init
from .numcore import Parameter, Tensor

logger = logging.getLogger(__name__)


class ResidualAttentionBlock(Module):
    """x + attn(ln_1(x)), then x + mlp(ln_2(x))."""

    def __init__(self, rng: np.random.Generator, width: int, mlp_ratio: int, eps: float):
        super().__init__()
        self.scale = 1.0 / np.sqrt(width)
        self.ln_1 = LayerNorm(width, eps)
        self.q = Linear(rng, width, width)
        self.k = Linear(rng, width, width)
        self.v = Linear(rng, width, width)
        self.proj = Linear(rng, width, width)
        self.ln_2 = LayerNorm(width, eps)
        self.mlp = MLP(rng, width, mlp_ratio)

    def __call__(self, x: Tensor) -> Tensor:
        x_norm = self.ln_1(x)
        weights = nc.softmax_rows(attention_scores(self.q(x_norm), self.k(x_norm), self.scale))
        x = nc.add(x, self.proj(nc.matmul(weights, self.v(x_norm))))
        return nc.add(x, self.mlp(self.ln_2(x)))


class ToyBackbone(Module):
    """Patch encoder with ``num_layers`` blocks, or a pass-through in identity mode."""

    def __init__(self, rng: np.random.Generator, config: BackboneConfig, dsvtm_config: DsvtmConfig):
        super().__init__()
        self.config = config
        self.num_patches = dsvtm_config.num_patches
        self.width = dsvtm_config.width
        self.input_width = config.input_width or dsvtm_config.width
        self.identity = config.mode == "identity"
        if self.identity:
            if self.input_width != self.width:
                raise ContractError(
                    f"identity backbone needs input width {self.width}, got {self.input_width}"
                )
            return
        self.embed = Linear(rng, self.input_width, self.width)
        self.position = Parameter(uniform_init(rng, self.width, (self.num_patches, self.width)))
        self.resblocks = ModuleList(
            ResidualAttentionBlock(rng, self.width, config.mlp_ratio, dsvtm_config.ln_eps)
            for _ in range(config.num_layers)
        )

    @property
    def num_layers(self) -> int:
        return self.config.num_layers

    def _check_tokens(self, tokens: Tensor) -> Tensor:
        tokens = nc.as_tensor(tokens)
        if tokens.shape != (self.num_patches, self.input_width):
            raise ShapeError("backbone input", (self.num_patches, self.input_width), tokens.shape)
        return tokens

    def embed_tokens(self, tokens: Tensor) -> Tensor:
        tokens = self._check_tokens(tokens)
        if self.identity:
            return tokens
        return nc.add(self.embed(tokens), self.position)

    def layer(self, index: int, x: Tensor) -> Tensor:
        """Apply backbone layer ``index`` (0-based)."""
        if self.identity:
            return x
        return self.resblocks[index](x)

    def encode(self, tokens: Tensor) -> List[Tensor]:
        """Per-layer features F^1..F^L for a token grid [N_v×D_in]."""
        x = self.embed_tokens(tokens)
        outputs = []
        for index in range(self.num_layers):
            x = self.layer(index, x)
            outputs.append(x)
        return outputs

    def forward_with_dsvtm(
        self,
        tokens: Tensor,
        dsvtm_stack: Sequence[DSVTM],
        s_shared: Tensor,
    ) -> Tuple[Tensor, List[DsvtmState]]:
        """Run the backbone with DSVTM z inserted after layer L - Z + z.

        Each DSVTM's F̂ replaces the stream entering the next layer unless the
        backbone runs in side-branch mode. Module z starts from the previous
        module's adapted prototypes, or from the shared S when
        ``restart_from_shared`` is set.
        """
        num_modules = len(dsvtm_stack)
        if num_modules < 1 or num_modules > self.num_layers:
            raise ContractError(f"need 1 <= Z <= L, got Z={num_modules}, L={self.num_layers}")
        first_tap = self.num_layers - num_modules

        x = self.embed_tokens(tokens)
        s_current = s_shared
        states: List[DsvtmState] = []
        f_hat = x
        for index in range(self.num_layers):
            x = self.layer(index, x)
            if index < first_tap:
                continue
            module = dsvtm_stack[index - first_tap]
            s_in = s_shared if module.config.restart_from_shared else s_current
            state = module(x, s_in)
            states.append(state)
            s_current = state.s_final
            f_hat = state.f_hat
            if not self.config.side_branch:
                x = f_hat
        return f_hat, states
