"""Dense tensor carrier and the exact infinity operator norm.

All numeric work is done in float64 regardless of on-disk precision: the
bound formulas raise per-layer norms to the (L-1)-th power and the
resulting magnitudes (1e100 and beyond on deep networks) leave float32
range immediately.
"""

from __future__ import annotations

import numpy as np


class DimensionError(ValueError):
    """Operand rank or shape does not match the operation."""


def as_array(x, dtype=np.float64) -> np.ndarray:
    """Coerce a Tensor or array-like to a float64 ndarray."""
    if isinstance(x, Tensor):
        return x.array
    return np.asarray(x, dtype=dtype)


class Tensor:
    """Immutable dense tensor: a shape plus row-major float64 elements.

    Invariants: ``prod(shape) == data.size`` and every element is finite.
    Construction rejects NaN/Inf so downstream norm arithmetic never has
    to re-check.
    """

    __slots__ = ("_array",)

    def __init__(self, data, shape=None):
        arr = np.asarray(data, dtype=np.float64)
        if shape is not None:
            arr = arr.reshape(tuple(shape))
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor elements must be finite (no NaN/Inf)")
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        self._array = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self._array.shape

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the elements (read-only)."""
        return self._array.reshape(-1)

    @property
    def array(self) -> np.ndarray:
        """The underlying read-only ndarray."""
        return self._array

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


def opnorm_inf(m) -> float:
    """Infinity operator norm of a matrix: the maximum absolute row sum.

    This equals sup ||Mx||_inf over ||x||_inf = 1 exactly; the supremum is
    attained at the sign vector of the maximizing row.
    """
    a = as_array(m)
    if a.ndim != 2:
        raise DimensionError(f"opnorm_inf needs a 2-D matrix, got ndim={a.ndim}")
    if a.size == 0:
        return 0.0
    return float(np.abs(a).sum(axis=1).max())


def matvec(m, x) -> Tensor:
    """Matrix-vector product."""
    a = as_array(m)
    v = as_array(x)
    if a.ndim != 2 or v.ndim != 1:
        raise DimensionError("matvec needs a matrix and a vector")
    if a.shape[1] != v.shape[0]:
        raise DimensionError(
            f"inner dimensions disagree: {a.shape} @ {v.shape}"
        )
    return Tensor(a @ v)
