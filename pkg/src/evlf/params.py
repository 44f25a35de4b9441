"""Parameter containers shared by the trainable modules."""

from __future__ import annotations

import dataclasses
import zlib

import numpy as np

from .tensor import Tensor


class ParamSet:
    """Mixin for dataclasses whose Tensor-typed fields are trainable weights."""

    def named_tensors(self) -> dict[str, Tensor]:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)
                if isinstance(getattr(self, f.name), Tensor)}

    def parameters(self) -> list[Tensor]:
        return list(self.named_tensors().values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.named_tensors().items()}

    def requires_grad_(self, flag: bool = True):
        for t in self.parameters():
            t.requires_grad = flag
            t.grad = None
        return self

    def copy(self):
        changes = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.named_tensors().items()}
        return dataclasses.replace(self, **changes)

    def checksum(self) -> int:
        crc = 0
        for name, arr in sorted(self.arrays().items()):
            crc = zlib.crc32(name.encode(), crc)
            crc = zlib.crc32(np.ascontiguousarray(arr).tobytes(), crc)
        return crc

    def to_blocks(self, prefix: str) -> dict[str, np.ndarray]:
        return {f"{prefix}.{k}": v for k, v in self.arrays().items()}

    @classmethod
    def from_blocks(cls, blocks: dict[str, np.ndarray], prefix: str, **static):
        tensors = {}
        for f in dataclasses.fields(cls):
            key = f"{prefix}.{f.name}"
            if key in blocks:
                tensors[f.name] = Tensor(np.array(blocks[key], dtype=np.float64))
        return cls(**tensors, **static)


def gaussian(rng: np.random.Generator, shape, std: float, requires_grad: bool = True) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = True) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = True) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)
