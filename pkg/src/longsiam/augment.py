"""Per-image training augmentation: small in-plane rotations and L/R mirroring."""

import math
from dataclasses import dataclass

import numpy as np

from .nifti import Volume

# stored axis order is (x: left-right, y: anterior-posterior, z: inferior-superior)
AXES = {"LR": 0, "AP": 1, "IS": 2}


@dataclass(frozen=True)
class AugmentConfig:
    max_rotation_deg: float = 5.0
    rotation_axis: str = "IS"
    flip_probability: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.max_rotation_deg < 0:
            raise ValueError("max_rotation_deg must be >= 0")
        if not 0.0 <= self.flip_probability <= 1.0:
            raise ValueError("flip_probability must lie in [0, 1]")
        if self.rotation_axis not in AXES:
            raise ValueError(f"rotation_axis must be one of {sorted(AXES)}")


def rotate_array(data, theta_deg, axis="IS"):
    """Rotate about the grid center in the plane orthogonal to ``axis``.

    Samples are pulled back through the inverse rotation and interpolated
    trilinearly; points that fall outside the grid read as 0.  Because the
    rotation axis coordinate maps onto itself, the trilinear weights along it
    are exactly (1, 0) and only the in-plane bilinear part is computed.
    """
    if abs(theta_deg) > 90:
        raise ValueError("rotation angle must satisfy |theta| <= 90 degrees")
    if theta_deg == 0:
        return data.copy()
    ax = AXES[axis] if isinstance(axis, str) else int(axis)
    plane = [a for a in range(3) if a != ax]
    moved = np.moveaxis(data, plane + [ax], [0, 1, 2])
    n0, n1, _ = moved.shape
    c0 = (n0 - 1) / 2.0
    c1 = (n1 - 1) / 2.0
    t = math.radians(theta_deg)
    cos_t, sin_t = math.cos(t), math.sin(t)
    i, j = np.meshgrid(np.arange(n0, dtype=np.float64), np.arange(n1, dtype=np.float64), indexing="ij")
    di, dj = i - c0, j - c1
    # inverse map: source = R(-theta) (p - c) + c
    src0 = cos_t * di + sin_t * dj + c0
    src1 = -sin_t * di + cos_t * dj + c1

    f0 = np.floor(src0)
    f1 = np.floor(src1)
    w0 = src0 - f0
    w1 = src1 - f1
    f0 = f0.astype(np.int64)
    f1 = f1.astype(np.int64)
    out = np.zeros(moved.shape, dtype=np.float64)
    for d0, d1, w in (
        (0, 0, (1 - w0) * (1 - w1)),
        (1, 0, w0 * (1 - w1)),
        (0, 1, (1 - w0) * w1),
        (1, 1, w0 * w1),
    ):
        k0 = f0 + d0
        k1 = f1 + d1
        inside = (k0 >= 0) & (k0 < n0) & (k1 >= 0) & (k1 < n1)
        weight = np.where(inside, w, 0.0)
        vals = moved[np.clip(k0, 0, n0 - 1), np.clip(k1, 0, n1 - 1)]
        out += weight[:, :, None] * vals
    # a convex combination of the data and 0 cannot leave this range
    out = np.clip(out, min(moved.min(), 0.0), max(moved.max(), 0.0))
    out = out.astype(np.result_type(data.dtype, np.float32), copy=False)
    return np.moveaxis(out, [0, 1, 2], plane + [ax])


def rotate(v, theta_deg, axis="IS"):
    return Volume(rotate_array(v.data, theta_deg, axis), v.spacing)


def flip_lr(v):
    return Volume(v.data[::-1].copy(), v.spacing)


def augment_array(data, cfg, rng):
    """Draw one rotation angle and one flip decision from ``rng`` and apply them."""
    theta = rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg)
    flip = rng.random() < cfg.flip_probability
    out = rotate_array(data, theta, cfg.rotation_axis)
    if flip:
        out = out[::-1].copy()
    return out


def augment_image(v, cfg, rng):
    return Volume(augment_array(v.data, cfg, rng), v.spacing)
