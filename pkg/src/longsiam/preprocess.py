"""Raw (skull-stripped) volume -> network-ready input.

The pipeline order is fixed: mask, scale to [0, 1], zero-pad to a common
grid, then halve the resolution with cubic B-spline interpolation.
"""

import math

import numpy as np

from .nifti import Volume

DEFAULT_TARGET = (102, 108, 75)

_POLE = math.sqrt(3.0) - 2.0
_GAIN = 6.0  # (1 - z)(1 - 1/z) for the cubic pole


def apply_mask(v, mask):
    m = np.asarray(mask.data if isinstance(mask, Volume) else mask)
    if m.shape != v.shape:
        raise ValueError(f"mask shape {m.shape} differs from volume shape {v.shape}")
    if not np.all((m == 0) | (m == 1)):
        raise ValueError("mask must contain only 0 and 1")
    return Volume(v.data * m.astype(v.data.dtype), v.spacing)


def scale_unit(v):
    """Min-max rescale to [0, 1]; a constant volume maps to zeros."""
    data = v.data
    lo = data.min()
    hi = data.max()
    if hi == lo:
        return Volume(np.zeros_like(data), v.spacing)
    return Volume((data - lo) / (hi - lo), v.spacing)


def zero_pad(v, target):
    target = tuple(int(t) for t in target)
    if len(target) != 3:
        raise ValueError("target must have three extents")
    if any(t < s for t, s in zip(target, v.shape)):
        raise ValueError(f"target {target} smaller than volume {v.shape}")
    # extra voxel of odd slack goes to the high side
    pads = [((t - s) // 2, (t - s) - (t - s) // 2) for t, s in zip(target, v.shape)]
    return Volume(np.pad(v.data, pads, mode="constant", constant_values=0), v.spacing)


def _mirror_index(idx, n):
    period = 2 * n - 2
    idx = np.abs(idx) % period
    return np.where(idx >= n, period - idx, idx)


def spline_coefficients_1d(s, axis=0):
    """Cubic B-spline interpolation coefficients along ``axis``.

    Boundary handling is whole-sample mirror symmetry, so the coefficients of
    the mirrored signal are the mirrored coefficients.
    """
    s = np.moveaxis(np.asarray(s, dtype=np.float64), axis, 0)
    n = s.shape[0]
    if n == 1:
        return np.moveaxis(s.copy(), 0, axis)
    z = _POLE
    period = 2 * n - 2
    # causal init: sum over one period of the mirrored signal, truncated once
    # z**k drops below double precision
    horizon = min(period, 64)
    idx = _mirror_index(np.arange(horizon), n)
    weights = z ** np.arange(horizon, dtype=np.float64)
    c_plus = np.empty_like(s)
    c_plus[0] = np.tensordot(weights, s[idx], axes=(0, 0))
    if horizon == period:
        c_plus[0] /= 1.0 - z**period
    for k in range(1, n):
        c_plus[k] = s[k] + z * c_plus[k - 1]
    c = np.empty_like(s)
    c[n - 1] = (z / (z * z - 1.0)) * (c_plus[n - 1] + z * c_plus[n - 2])
    for k in range(n - 2, -1, -1):
        c[k] = z * (c[k + 1] - c_plus[k])
    return np.moveaxis(_GAIN * c, 0, axis)


def _bspline3(t):
    t = np.abs(t)
    out = np.where(t < 1.0, 2.0 / 3.0 - t * t + 0.5 * t**3, 0.0)
    return np.where((t >= 1.0) & (t < 2.0), (2.0 - t) ** 3 / 6.0, out)


def _eval_spline_1d(coef, coords, axis):
    """Evaluate a cubic spline with mirror-extended coefficients at ``coords``."""
    coef = np.moveaxis(coef, axis, 0)
    n = coef.shape[0]
    base = np.floor(coords).astype(np.int64)
    out = np.zeros((len(coords),) + coef.shape[1:], dtype=np.float64)
    for shift in (-1, 0, 1, 2):
        k = base + shift
        w = _bspline3(coords - k)
        if n == 1:
            taps = np.zeros_like(k)
        else:
            taps = _mirror_index(k, n)
        out += w.reshape((-1,) + (1,) * (coef.ndim - 1)) * coef[taps]
    return np.moveaxis(out, 0, axis)


def downscale_spline(v, factor=2, order=3, align="center"):
    """Halve every axis using cubic B-spline interpolation.

    Output extents are ``ceil(n / 2)``.  With ``align="center"`` output voxel
    ``i`` samples input coordinate ``2 i + 0.5``, the midpoint of the two input
    voxels it replaces; ``align="corner"`` samples ``2 i`` (which reduces to
    plain decimation, since the spline interpolates its knots).
    """
    if factor != 2 or order != 3:
        raise ValueError("only factor 2 with cubic splines is supported")
    if any(n < 4 for n in v.shape):
        raise ValueError(f"volume {v.shape} too small to downscale (need >= 4 per axis)")
    if align not in ("center", "corner"):
        raise ValueError(f"unknown alignment {align!r}")
    shift = 0.5 if align == "center" else 0.0
    out = np.asarray(v.data, dtype=np.float64)
    # interpolation commutes with an intensity offset; removing one makes
    # constant regions filter to exact zeros and come back bit-exact
    ref = out.flat[0]
    out = out - ref
    for axis, n in enumerate(v.shape):
        coef = spline_coefficients_1d(out, axis)
        coords = 2.0 * np.arange(math.ceil(n / 2)) + shift
        out = _eval_spline_1d(coef, coords, axis)
    spacing = tuple(s * factor for s in v.spacing)
    return Volume(out + ref, spacing)


def preprocess_volume(v, target=DEFAULT_TARGET, mask=None, align="center"):
    """Mask, scale, pad to twice ``target`` and downscale to ``target``.

    A volume already at ``target`` resolution is only masked and rescaled, which
    makes the pipeline idempotent on its own output.
    """
    target = tuple(int(t) for t in target)
    if mask is not None:
        v = apply_mask(v, mask)
    v = scale_unit(v)
    if v.shape == target:
        return v
    v = zero_pad(v, tuple(2 * t for t in target))
    out = downscale_spline(v, align=align)
    # cubic interpolation overshoots near sharp edges and smooths the peak below 1;
    # rescaling the clipped result makes the output span [0, 1] like the input did
    return scale_unit(Volume(np.clip(out.data, 0.0, 1.0), out.spacing))


def preprocess_pair(baseline, followup, target=DEFAULT_TARGET, masks=(None, None), align="center"):
    b = preprocess_volume(baseline, target, masks[0], align)
    f = preprocess_volume(followup, target, masks[1], align)
    return b, f
