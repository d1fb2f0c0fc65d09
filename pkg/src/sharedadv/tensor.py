"""Dense tensor arithmetic shared by every other module.

Tensors are plain row-major ``numpy.ndarray`` values: float32 for
experiments, float64 for gradient verification. The helpers here add the
contracts the rest of the toolkit relies on: finiteness after every
public operation, explicit shape checking, and uniform sampling tied to
an :class:`~sharedadv.rng.RngStream`. All operations are pure; inputs
are never mutated.
"""

from __future__ import annotations

import numpy as np

from .rng import RngStream


class NonFiniteError(ValueError):
    """A tensor contains NaN or Inf where the contract requires finite values."""


class ShapeMismatch(ValueError):
    """Operand shapes are incompatible for the requested operation."""


def require_finite(t: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(t)):
        raise NonFiniteError(f"{what} contains non-finite values")
    return t


def as_tensor(data, dtype=np.float32) -> np.ndarray:
    """Coerce to a contiguous row-major array of the given float dtype."""
    return np.ascontiguousarray(data, dtype=dtype)


def sign(t: np.ndarray) -> np.ndarray:
    """Elementwise sign with sign(0) = 0."""
    require_finite(t, "sign input")
    return np.sign(t)


def clamp(t: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Clip every element into [lo, hi]; interior elements pass through bit-exactly."""
    if lo > hi:
        raise ValueError(f"clamp bounds reversed: lo={lo} > hi={hi}")
    return np.clip(t, lo, hi)


def axpy(a: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """a * x + y, elementwise."""
    if x.shape != y.shape:
        raise ShapeMismatch(f"axpy shapes differ: {x.shape} vs {y.shape}")
    return a * x + y


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of a [m, k] and b [k, n]."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatch(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul inner extents differ: {a.shape} vs {b.shape}")
    return a @ b


def uniform(rng: RngStream, shape, lo: float, hi: float, dtype=np.float32) -> np.ndarray:
    """Uniform tensor in [lo, hi], deterministic given the stream."""
    return rng.uniform(shape, lo, hi, dtype=dtype)
