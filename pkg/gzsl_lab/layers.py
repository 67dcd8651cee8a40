"""
Layers
======
Parameter containers and the small building blocks shared by the backbone,
the DSVTM stack and the head.
"""

from collections import OrderedDict
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from . import numcore as nc
from .numcore import Parameter, Tensor


def uniform_init(rng: np.random.Generator, fan_in: int, shape: Tuple[int, ...]) -> np.ndarray:
    """Zero-mean uniform values in [-1/sqrt(fan_in), 1/sqrt(fan_in)]."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Tree of named parameters and child modules.

    Attribute assignment registers Parameters and Modules in insertion order,
    so parameter paths such as ``dsvtm.0.imse.0.q.weight`` are deterministic.
    """

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_children", OrderedDict())

    def __setattr__(self, key, value):
        if isinstance(value, Parameter):
            self._params[key] = value
        elif isinstance(value, Module):
            self._children[key] = value
        object.__setattr__(self, key, value)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for key, param in self._params.items():
            yield prefix + key, param
        for key, child in self._children.items():
            yield from child.named_parameters(prefix + key + ".")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def assign_names(self, prefix: str = "") -> None:
        """Stamp every parameter with its dotted path."""
        for name, param in self.named_parameters(prefix):
            param.name = name

    def state_dict(self) -> Dict[str, np.ndarray]:
        return OrderedDict((name, p.data.copy()) for name, p in self.named_parameters())

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, values in state.items():
            own[name].assign(values)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class ModuleList(Module):
    """Indexed children, named ``0``, ``1``, ..."""

    def __init__(self, modules=()):
        super().__init__()
        for module in modules:
            self.append(module)

    def append(self, module: Module) -> None:
        setattr(self, str(len(self._children)), module)

    def __getitem__(self, index: int) -> Module:
        return self._children[str(index)]

    def __len__(self) -> int:
        return len(self._children)

    def __iter__(self):
        return iter(self._children.values())


class Linear(Module):
    """y = x @ weight (+ bias), with weight stored as in_features × out_features."""

    def __init__(self, rng: np.random.Generator, in_features: int, out_features: int, bias: bool = True):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(uniform_init(rng, in_features, (in_features, out_features)))
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = nc.matmul(x, self.weight)
        if self.bias is not None:
            out = nc.add(out, self.bias)
        return out


class LayerNorm(Module):
    def __init__(self, width: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = Parameter(np.ones(width))
        self.beta = Parameter(np.zeros(width))

    def __call__(self, x: Tensor) -> Tensor:
        return nc.layer_norm(x, self.gamma, self.beta, self.eps)


class MLP(Module):
    """Two row-wise linear layers with GELU between (width → ratio·width → width)."""

    def __init__(self, rng: np.random.Generator, width: int, ratio: int = 4):
        super().__init__()
        self.fc1 = Linear(rng, width, ratio * width)
        self.fc2 = Linear(rng, ratio * width, width)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(nc.gelu(self.fc1(x)))


def zero_parameters(module: Module, include_norms: bool = True) -> None:
    """Set every parameter of a module to zero (LayerNorm gains optionally kept)."""
    for name, param in module.named_parameters():
        if not include_norms and name.endswith("gamma"):
            continue
        param.assign(np.zeros(param.shape))


def attention_scores(q: Tensor, k: Tensor, scale: Optional[float] = None) -> Tensor:
    """q @ kᵀ, optionally multiplied by a constant."""
    scores = nc.matmul(q, nc.transpose(k))
    if scale is not None:
        scores = nc.mul(scores, scale)
    return scores
