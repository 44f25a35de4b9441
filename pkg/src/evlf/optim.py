"""First-order optimizers over :class:`~evlf.tensor.Tensor` parameters."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .tensor import Tensor


@dataclass
class ParamGroup:
    params: list[Tensor]
    lr: float
    weight_decay: float = 0.0


class SGD:
    def __init__(self, params: Iterable[Tensor], lr: float):
        self.params = list(params)
        self.lr = lr

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for p in self.params:
            if p.grad is not None:
                p.data = p.data - self.lr * p.grad


@dataclass
class AdamW:
    """Adam with decoupled weight decay (decay applied to weights, not gradients)."""

    groups: list[ParamGroup]
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    t: int = 0
    _m: dict[int, np.ndarray] = field(default_factory=dict, repr=False)
    _v: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    @classmethod
    def single(cls, params: Iterable[Tensor], lr: float, weight_decay: float = 0.0) -> "AdamW":
        return cls([ParamGroup(list(params), lr, weight_decay)])

    def zero_grad(self) -> None:
        for group in self.groups:
            for p in group.params:
                p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for group in self.groups:
            if group.lr == 0.0:
                continue
            for p in group.params:
                if p.grad is None:
                    continue
                key = id(p)
                m = self._m.get(key)
                if m is None:
                    m = self._m[key] = np.zeros_like(p.data)
                    self._v[key] = np.zeros_like(p.data)
                v = self._v[key]
                g = p.grad
                p.data = p.data * (1.0 - group.lr * group.weight_decay)
                m *= b1
                m += (1.0 - b1) * g
                v *= b2
                v += (1.0 - b2) * g * g
                denom = np.sqrt(v) / np.sqrt(bc2) + self.eps
                p.data = p.data - (group.lr / bc1) * m / denom
