"""
Parameter Containers
Named parameter trees with deterministic initialization.
"""

from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from errors import DimensionError, InternalError
from .numeric import Tensor, layer_norm, linear, add, mul


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=np.float64) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


def fan_uniform(rng: np.random.Generator, rows: int, width: int, dtype=np.float64) -> np.ndarray:
    """Embedding-table init, U(-1/sqrt(width), 1/sqrt(width))"""
    limit = 1.0 / np.sqrt(width)
    return rng.uniform(-limit, limit, size=(rows, width)).astype(dtype)


class Module:
    """
    Base class for parameter containers.

    Parameters and child modules are registered under names; the dotted path
    of every parameter (``layers.0.attn.wq.weight``) is its identity in
    checkpoints and freeze policies.
    """

    def __init__(self):
        self._params: Dict[str, Tensor] = {}
        self._children: Dict[str, "Module"] = {}
        self.training = True

    def register(self, name: str, value: np.ndarray) -> Tensor:
        tensor = Tensor(value, requires_grad=True, name=name)
        self._params[name] = tensor
        return tensor

    def child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, tensor in self._params.items():
            yield prefix + name, tensor
        for name, module in self._children.items():
            yield from module.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> List[Tensor]:
        return [t for _, t in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.parameters()))

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for module in self._children.values():
            module.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state(self) -> Dict[str, np.ndarray]:
        """Copy of every parameter array, keyed by dotted name"""
        return {name: t.data.copy() for name, t in self.named_parameters()}

    def load_state(self, state: Dict[str, np.ndarray], strict: bool = True) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if strict and (missing or unexpected):
            raise InternalError(
                f"state mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}"
            )
        for name, array in state.items():
            if name not in params:
                continue
            target = params[name]
            if target.shape != np.shape(array):
                raise DimensionError(f"parameter {name}: expected {target.shape}, got {np.shape(array)}")
            target.data = np.array(array, dtype=target.dtype)

    def set_requires_grad(self, names, flag: bool) -> None:
        names = set(names)
        for name, tensor in self.named_parameters():
            if name in names:
                tensor.requires_grad = flag


class Linear(Module):
    """Affine map over the last axis"""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True,
                 dtype=np.float64):
        super().__init__()
        self.in_dim, self.out_dim = in_dim, out_dim
        self.weight = self.register("weight", glorot_uniform(rng, in_dim, out_dim, dtype))
        self.bias = self.register("bias", np.zeros(out_dim, dtype=dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class LayerNorm(Module):
    """Layer normalization with learned gain and bias"""

    def __init__(self, dim: int, eps: float = 1e-5, dtype=np.float64):
        super().__init__()
        self.eps = eps
        self.gain = self.register("gain", np.ones(dim, dtype=dtype))
        self.bias = self.register("bias", np.zeros(dim, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return add(mul(layer_norm(x, self.eps), self.gain), self.bias)


def zero_(module: Module, names: Optional[List[str]] = None) -> None:
    """Zero the named parameters of a module (all when names is None)"""
    for name, tensor in module.named_parameters():
        if names is None or name in names:
            tensor.data = np.zeros_like(tensor.data)
