"""Flat parameter vectors with a named shape registry."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ShapeError
from .tensor_core import Tensor


@dataclass(frozen=True)
class RegistryEntry:
    name: str
    shape: tuple[int, ...]
    start: int
    end: int
    layer: int


class ShapeRegistry:
    """Ordered mapping from tensor names to index ranges in a flat vector."""

    def __init__(self, entries):
        self.entries = tuple(entries)
        self._by_name = {e.name: e for e in self.entries}
        if len(self._by_name) != len(self.entries):
            raise ShapeError("duplicate tensor name in registry")
        self.size = self.entries[-1].end if self.entries else 0

    @classmethod
    def build(cls, named_shapes) -> "ShapeRegistry":
        """Build from (name, shape, layer) triples, packed in order."""
        entries = []
        offset = 0
        for name, shape, layer in named_shapes:
            shape = tuple(int(s) for s in shape)
            count = int(np.prod(shape)) if shape else 1
            entries.append(RegistryEntry(name, shape, offset, offset + count, layer))
            offset += count
        return cls(entries)

    def __contains__(self, name) -> bool:
        return name in self._by_name

    def __iter__(self):
        return iter(self.entries)

    def entry(self, name) -> RegistryEntry:
        try:
            return self._by_name[name]
        except KeyError:
            raise ShapeError(f"unknown tensor name {name!r}") from None

    def slice(self, name) -> slice:
        e = self.entry(name)
        return slice(e.start, e.end)

    def names(self):
        return [e.name for e in self.entries]

    def layer_ids(self):
        return sorted({e.layer for e in self.entries})

    def indices_for_layers(self, layers) -> np.ndarray:
        wanted = set(layers)
        idx = [np.arange(e.start, e.end) for e in self.entries if e.layer in wanted]
        if not idx:
            return np.empty(0, dtype=np.int64)
        return np.concatenate(idx)

    def indices_for_names(self, names) -> np.ndarray:
        idx = [np.arange(self.entry(n).start, self.entry(n).end) for n in names]
        if not idx:
            return np.empty(0, dtype=np.int64)
        return np.concatenate(idx)


class ParamVector:
    """Immutable-by-convention flat float64 store for all model weights."""

    __slots__ = ("registry", "data")

    def __init__(self, registry: ShapeRegistry, data):
        self.registry = registry
        arr = np.asarray(data, dtype=np.float64)
        if arr.shape != (registry.size,):
            raise ShapeError(
                f"parameter vector length {arr.shape} != registry size {registry.size}"
            )
        if not np.all(np.isfinite(arr)):
            raise NumericError("parameter vector holds non-finite entries")
        self.data = arr

    @classmethod
    def zeros(cls, registry: ShapeRegistry) -> "ParamVector":
        return cls(registry, np.zeros(registry.size))

    def tensor(self, name) -> Tensor:
        e = self.registry.entry(name)
        return Tensor(e.shape, self.data[e.start:e.end])

    def with_data(self, data) -> "ParamVector":
        return ParamVector(self.registry, data)

    def copy(self) -> "ParamVector":
        return ParamVector(self.registry, self.data.copy())

    def content_hash(self) -> str:
        return hashlib.sha256(self.data.tobytes()).hexdigest()

    def __len__(self) -> int:
        return self.data.size

    def __repr__(self):
        return f"ParamVector(n={self.data.size}, tensors={len(self.registry.entries)})"
