"""Named parameter storage and the Adam optimizer."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, List, Optional, Tuple

import numpy as np

from .autodiff import Tensor
from .errors import GradientError, ShapeError


class ParameterStore:
    """Map of dotted parameter names to trainable tensors.

    Iteration is always in lexicographic name order so that initialization,
    serialization and optimizer updates are reproducible.
    """

    def __init__(self) -> None:
        self._params: Dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self, prefix: str = "") -> List[str]:
        return sorted(n for n in self._params if n.startswith(prefix))

    def items(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name in self.names(prefix):
            yield name, self._params[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.names())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def snapshot(self, prefix: str = "") -> Dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.items(prefix)}

    def load(self, values: Dict[str, np.ndarray], strict: bool = True) -> None:
        if strict and set(values) != set(self._params):
            missing = sorted(set(self._params) - set(values))
            extra = sorted(set(values) - set(self._params))
            raise KeyError(f"parameter mismatch: missing {missing}, unexpected {extra}")
        for name, value in values.items():
            t = self._params[name]
            value = np.asarray(value, dtype=np.float64)
            if value.shape != t.data.shape:
                raise ShapeError(f"{name}: stored shape {value.shape} != {t.data.shape}")
            t.data = value.copy()


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: ParameterStore, state: AdamState, names: Optional[Iterable[str]] = None) -> None:
    """One bias-corrected Adam update of ``names`` (default: every parameter).

    Gradients are left in place; the caller zeroes them.
    """
    names = params.names() if names is None else sorted(names)
    for name in names:
        if params[name].grad is None:
            raise GradientError(f"parameter {name!r} has no gradient")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name in names:
        p = params[name]
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)


def he_normal(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
