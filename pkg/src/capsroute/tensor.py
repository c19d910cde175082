"""Dense float64 arrays and the ordered reductions the routing stack builds on.

Values are C-contiguous float64 numpy arrays throughout the package.  Every
reduction defined here accumulates in ascending index order along the reduced
axis (a plain left-to-right loop, no pairwise/tree regrouping), so results are
bit-identical to the scalar-loop oracles in the test suite and reproducible
run to run on a given platform.  Ops are pure: inputs are never mutated.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "as_tensor",
    "elementwise_mul",
    "reduce_sum",
    "matmul_small",
    "l2_norm",
]


def as_tensor(values) -> np.ndarray:
    """Coerce ``values`` to a C-contiguous float64 array.

    Rejects arrays with an empty dimension: every shape entry must be >= 1,
    so the number of stored elements always equals the product of the shape.
    """
    arr = np.ascontiguousarray(values, dtype=np.float64)
    if arr.ndim > 0 and min(arr.shape) < 1:
        raise ValueError(f"tensor dimensions must be >= 1, got shape {arr.shape}")
    return arr


def _normalize_axis(axis: int, rank: int) -> int:
    if not isinstance(axis, (int, np.integer)):
        raise TypeError(f"axis must be an integer, got {type(axis).__name__}")
    if not -rank <= axis < rank:
        raise ValueError(f"axis {axis} out of range for rank {rank}")
    return axis % rank


def elementwise_mul(a, b) -> np.ndarray:
    """Hadamard product of two tensors of identical shape."""
    a = as_tensor(a)
    b = as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch for elementwise product: {a.shape} vs {b.shape}")
    return a * b


def reduce_sum(a, axis: int) -> np.ndarray:
    """Sum ``a`` over one axis, accumulating in ascending index order.

    The reduced axis is dropped from the result (an axis of length 1 is
    squeezed away with values unchanged).  Accumulation is a strict
    left-to-right loop over the reduced axis — index 0 first, then 1, ... —
    which fixes the floating-point rounding exactly.
    """
    a = as_tensor(a)
    if a.ndim == 0:
        raise ValueError("cannot reduce a rank-0 tensor")
    ax = _normalize_axis(axis, a.ndim)
    moved = np.moveaxis(a, ax, 0)
    acc = moved[0].copy()
    for i in range(1, moved.shape[0]):
        acc += moved[i]
    return acc


def matmul_small(a, b) -> np.ndarray:
    """2-D matrix product with ascending-inner-index accumulation.

    out[r, c] = sum_k a[r, k] * b[k, c], with the k terms added in ascending
    order starting from 0.0 — exactly the classic triple loop, so the result
    is bit-identical to a scalar reference implementation.  Intended for the
    small square matrices used in capsule transforms, not as a BLAS stand-in.
    """
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul_small expects 2-D operands, got ranks {a.ndim} and {b.ndim}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dimensions disagree: {a.shape} @ {b.shape}")
    return matmul_lastdims(a, b)


def matmul_lastdims(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Batched matrix product over the last two axes, ascending-inner-index.

    ``a`` has shape (..., r, c) and ``b`` shape (..., c, d); leading axes
    broadcast.  Accumulation order over c matches :func:`matmul_small`
    exactly (zeros init, then index 0, 1, ...), so stacking and slicing
    commute with the 2-D op bit-for-bit.
    """
    inner = a.shape[-1]
    if b.shape[-2] != inner:
        raise ValueError(f"inner dimensions disagree: {a.shape} @ {b.shape}")
    lead = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    out = np.zeros(lead + (a.shape[-2], b.shape[-1]), dtype=np.float64)
    for c in range(inner):
        out += a[..., :, c, np.newaxis] * b[..., np.newaxis, c, :]
    return out


def l2_norm(a) -> float:
    """Euclidean norm over *all* elements of ``a``.

    Squares are accumulated in ascending flat (row-major) index order.
    """
    a = as_tensor(a)
    flat = a.reshape(-1)
    acc = 0.0
    for i in range(flat.size):
        v = float(flat[i])
        acc += v * v
    return math.sqrt(acc)


def norm_lastaxis(a: np.ndarray) -> np.ndarray:
    """Euclidean norms along the last axis, ascending-index accumulation.

    Shape (..., k) -> (...,).  The per-slice rounding matches a scalar loop
    over the last axis, while the computation stays vectorized across the
    leading axes.  (The squares are accumulated feature by feature, which
    gives bit-identical results to squaring the whole tensor first but
    never materializes it.)
    """
    a = as_tensor(a)
    if a.ndim == 0:
        raise ValueError("cannot take a last-axis norm of a rank-0 tensor")
    moved = np.moveaxis(a, -1, 0)
    acc = moved[0] * moved[0]
    for i in range(1, moved.shape[0]):
        acc += moved[i] * moved[i]
    return np.sqrt(acc)
