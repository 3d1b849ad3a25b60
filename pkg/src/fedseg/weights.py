"""Named collections of model tensors."""

from __future__ import annotations

from collections.abc import Mapping
from typing import Callable, Iterable, Iterator

import numpy as np

from .errors import ShapeError


class ModelWeights(Mapping):
    """Ordered ``name -> ndarray`` mapping plus the set of trainable names.

    Instances are treated as values: arithmetic helpers return new objects and
    never write into the arrays of their inputs.
    """

    def __init__(self, tensors: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]],
                 trainable: Iterable[str] | None = None):
        self._tensors: dict[str, np.ndarray] = dict(tensors)
        names = self._tensors.keys()
        self.trainable = frozenset(names if trainable is None else trainable)
        unknown = self.trainable - set(names)
        if unknown:
            raise KeyError(f"trainable names not present: {sorted(unknown)}")

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def __repr__(self) -> str:
        return f"ModelWeights({len(self)} tensors, {self.num_params()} values)"

    def set(self, name: str, value: np.ndarray) -> None:
        if name not in self._tensors:
            raise KeyError(name)
        if value.shape != self._tensors[name].shape:
            raise ShapeError(f"cannot replace {name}", self._tensors[name].shape, value.shape)
        self._tensors[name] = value

    def trainable_names(self) -> list[str]:
        return [n for n in self._tensors if n in self.trainable]

    def num_params(self, trainable_only: bool = False) -> int:
        return sum(a.size for n, a in self._tensors.items() if not trainable_only or n in self.trainable)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {n: a.shape for n, a in self._tensors.items()}

    def check_compatible(self, other: "ModelWeights") -> None:
        if list(self._tensors) != list(other):
            raise ShapeError("tensor names differ")
        for name, arr in self._tensors.items():
            if arr.shape != other[name].shape:
                raise ShapeError(f"tensor {name} shape differs", arr.shape, other[name].shape)

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "ModelWeights":
        return ModelWeights({n: fn(a) for n, a in self._tensors.items()}, self.trainable)

    def copy(self) -> "ModelWeights":
        return self.map(np.copy)

    def astype(self, dtype) -> "ModelWeights":
        return self.map(lambda a: a.astype(dtype))

    def zeros_like(self, dtype=None) -> "ModelWeights":
        return self.map(lambda a: np.zeros(a.shape, dtype=dtype or a.dtype))

    def delta_from(self, base: "ModelWeights") -> "ModelWeights":
        """``self - base`` in float64 (exact for float32 operands)."""
        self.check_compatible(base)
        return ModelWeights(
            {n: a.astype(np.float64) - base[n].astype(np.float64) for n, a in self._tensors.items()},
            self.trainable,
        )

    def apply_delta(self, delta: "ModelWeights") -> "ModelWeights":
        """``self + delta`` computed in float64 and cast back to this dtype."""
        self.check_compatible(delta)
        return ModelWeights(
            {n: (a.astype(np.float64) + delta[n]).astype(a.dtype) for n, a in self._tensors.items()},
            self.trainable,
        )

    def equals(self, other: "ModelWeights") -> bool:
        """Bit-exact comparison of names, shapes, dtypes and values."""
        if list(self._tensors) != list(other):
            return False
        return all(
            a.dtype == other[n].dtype and a.shape == other[n].shape
            and a.tobytes() == other[n].tobytes()
            for n, a in self._tensors.items()
        )
