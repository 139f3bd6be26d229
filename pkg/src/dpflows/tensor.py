"""Dense float64 tensors and the three kernels the workflows are built from."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ShapeError


class Tensor:
    """Row-major float64 storage with an explicit shape.

    ``data`` is always the flat backing array; ``array`` exposes a shaped
    view for callers that want numpy semantics.
    """

    __slots__ = ("shape", "data")

    def __init__(self, shape: Sequence[int], data=None):
        shape = tuple(int(e) for e in shape)
        if not shape or any(e < 1 for e in shape):
            raise ShapeError(f"all extents must be >= 1, got {shape}")
        n = int(np.prod(shape))
        if data is None:
            flat = np.zeros(n, dtype=np.float64)
        else:
            flat = np.array(data, dtype=np.float64).reshape(-1)
            if flat.size != n:
                raise ShapeError(f"data has {flat.size} elements, shape {shape} needs {n}")
        self.shape = shape
        self.data = flat

    @classmethod
    def from_nested(cls, nested) -> "Tensor":
        arr = np.array(nested, dtype=np.float64)
        return cls(arr.shape, arr.ravel())

    @property
    def array(self) -> np.ndarray:
        return self.data.reshape(self.shape)

    @property
    def element_count(self) -> int:
        return self.data.size

    def copy(self) -> "Tensor":
        return Tensor(self.shape, self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-D tensors."""
    if len(a.shape) != 2 or len(b.shape) != 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return Tensor((a.shape[0], b.shape[1]), np.dot(a.array, b.array).ravel())


def per_sample_grad(dy_b: Tensor, x_b: Tensor) -> Tensor:
    """Gradient contribution of one sample: G[d][p] = sum_t dY[t][d] * X[t][p].

    Identical to ``matmul(transpose(dY_b), X_b)`` including accumulation order.
    """
    if len(dy_b.shape) != 2 or len(x_b.shape) != 2:
        raise ShapeError(f"per_sample_grad needs matrices, got {dy_b.shape} and {x_b.shape}")
    if dy_b.shape[0] != x_b.shape[0]:
        raise ShapeError(f"time extents differ: {dy_b.shape} vs {x_b.shape}")
    return Tensor((dy_b.shape[1], x_b.shape[1]), np.dot(dy_b.array.T, x_b.array).ravel())


def frob_norm_sq(m: Tensor) -> float:
    """Sum of squared entries."""
    return float(np.dot(m.data, m.data))
