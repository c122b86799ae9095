"""Checked dense-array primitives.

Arrays are plain row-major ``numpy.ndarray`` objects in one of two
precisions.  These helpers add the shape discipline the rest of the package
relies on: no implicit broadcasting, explicit axes, and a hard error when a
result stops being finite.
"""

import math
import sys

import numpy as np

SINGLE = np.float32
DOUBLE = np.float64

_MAX_ELEMENTS = sys.maxsize


class ShapeError(ValueError):
    pass


def element_count(shape):
    dims = tuple(int(d) for d in shape)
    if not dims or any(d < 1 for d in dims):
        raise ShapeError(f"invalid shape {shape!r}: extents must be >= 1")
    count = math.prod(dims)
    if count > _MAX_ELEMENTS:
        raise OverflowError(f"shape {dims} holds {count} elements")
    return count


def check_finite(t, what="tensor"):
    if not np.all(np.isfinite(t)):
        raise FloatingPointError(f"{what} contains NaN or Inf")
    return t


def zeros(shape, dtype=SINGLE):
    element_count(shape)
    return np.zeros(tuple(int(d) for d in shape), dtype=dtype)


_ELEMENTWISE = {"add": np.add, "sub": np.subtract, "mul": np.multiply}


def elementwise(op, a, b):
    """Apply ``add``, ``sub`` or ``mul`` to two arrays of identical shape."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    # overflow is reported by check_finite instead of a warning
    with np.errstate(over="ignore", invalid="ignore"):
        out = fn(a, b)
    return check_finite(out, f"{op} result")


def matmul(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul expects two matrices")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner extents differ: {a.shape} @ {b.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = a @ b
    return check_finite(out, "matmul result")


def _normalize_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    out = []
    for ax in axes:
        ax = int(ax)
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise ShapeError(f"repeated axis in {tuple(axes)}")
    return tuple(sorted(out))


def reduce(op, t, axes=None):
    """Reduce over ``axes`` (all axes when None), keeping the others in order.

    ``argmax`` over several axes returns the flat index into those axes taken
    in row-major order; ties resolve to the lowest index.
    """
    t = np.asarray(t)
    axes = _normalize_axes(axes, t.ndim)
    if op == "sum":
        return t.sum(axis=axes)
    if op == "mean":
        return t.mean(axis=axes)
    if op == "max":
        return t.max(axis=axes)
    if op == "argmax":
        keep = [ax for ax in range(t.ndim) if ax not in axes]
        moved = np.transpose(t, keep + list(axes))
        flat = moved.reshape([t.shape[ax] for ax in keep] + [-1])
        # np.argmax returns the first occurrence of the maximum
        return np.argmax(flat, axis=-1)
    raise ValueError(f"unknown reduction {op!r}")


def reshape(t, new_shape):
    t = np.asarray(t)
    if element_count(new_shape) != t.size:
        raise ShapeError(f"cannot reshape {t.shape} into {tuple(new_shape)}")
    return np.reshape(t, tuple(int(d) for d in new_shape))
