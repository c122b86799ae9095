"""Synthetic longitudinal cohort with a controllable atrophy signal.

Each subject is an ellipsoidal "brain" with a smooth tissue texture and a
dark central "ventricle".  Follow-up scans of Decline subjects show ventricle
dilation plus erosion of the outer boundary; Stable subjects only drift
slightly.  Labels are known by construction.
"""

import os
from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy import ndimage

from .cohort import DECLINE, STABLE, Cohort, Sample, write_manifest
from . import nifti
from .nifti import Volume

VENTRICLE_INTENSITY = 0.15
TISSUE_RANGE = (0.5, 1.0)
BRAIN_SEMI_AXIS = 0.44  # fraction of the grid extent
VENTRICLE_SEMI_AXIS = 0.3  # fraction of the brain semi-axes
AXIS_JITTER = 0.1
MIN_EXTENT = 16

PRESETS = {
    "full": (102, 108, 75),
    "desk": (32, 32, 24),
}


@dataclass(frozen=True)
class CohortSpec:
    n_stable: int = 134
    n_decline: int = 113
    volume_shape: tuple = PRESETS["full"]
    noise_sigma: float = 0.02
    decline_ventricle_growth: tuple = (1.05, 1.15)
    stable_drift: tuple = (0.99, 1.01)
    decline_erosion: int = 1
    spacing: tuple = (2.0, 2.0, 2.0)
    seed: int = 0

    def __post_init__(self):
        if self.n_stable < 0 or self.n_decline < 0:
            raise ValueError("subject counts must be non-negative")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        for name in ("decline_ventricle_growth", "stable_drift"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name} must be a positive (low, high) range")
        if self.decline_erosion < 0:
            raise ValueError("decline_erosion must be non-negative")
        if len(self.volume_shape) != 3:
            raise ValueError("volume_shape must have three extents")

    @classmethod
    def preset(cls, name, **overrides):
        return cls(volume_shape=PRESETS[name], **overrides)

    def null_control(self):
        """Same cohort recipe with the disease signal switched off."""
        return replace(self, decline_ventricle_growth=self.stable_drift, decline_erosion=0)

    def to_dict(self):
        return asdict(self)


def _grid(shape):
    center = [(n - 1) / 2.0 for n in shape]
    return np.meshgrid(*[np.arange(n, dtype=np.float64) - c for n, c in zip(shape, center)], indexing="ij")


def _ellipsoid(coords, semi_axes):
    return sum((c / a) ** 2 for c, a in zip(coords, semi_axes)) <= 1.0


def make_subject(spec, rng):
    """Baseline scan: textured ellipsoid with a dark ellipsoidal cavity, zero outside."""
    shape = tuple(int(n) for n in spec.volume_shape)
    if min(shape) < MIN_EXTENT:
        raise ValueError(f"volume extents {shape} too small (need >= {MIN_EXTENT})")
    jitter = rng.uniform(1 - AXIS_JITTER, 1 + AXIS_JITTER, size=3)
    brain_axes = BRAIN_SEMI_AXIS * np.array(shape, dtype=np.float64) * jitter
    vent_jitter = rng.uniform(1 - AXIS_JITTER, 1 + AXIS_JITTER, size=3)
    vent_axes = VENTRICLE_SEMI_AXIS * brain_axes * vent_jitter
    coords = _grid(shape)
    brain = _ellipsoid(coords, brain_axes)
    ventricle = _ellipsoid(coords, vent_axes) & brain

    texture = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=max(1.0, min(shape) / 16))
    inside = texture[brain]
    lo, hi = inside.min(), inside.max()
    t_lo, t_hi = TISSUE_RANGE
    tissue = t_lo + (texture - lo) * ((t_hi - t_lo) / (hi - lo))

    data = np.zeros(shape, dtype=np.float32)
    data[brain] = tissue[brain]
    data[ventricle] = VENTRICLE_INTENSITY
    return Volume(data, spec.spacing)


def brain_mask(v):
    return np.asarray(v.data if isinstance(v, Volume) else v) > 0


def ventricle_mask(v):
    data = np.asarray(v.data if isinstance(v, Volume) else v)
    return np.isclose(data, VENTRICLE_INTENSITY, atol=1e-6)


def rescale_ventricle(data, factor):
    """Scale the ventricle cavity about its centroid by ``factor`` per axis.

    The cavity is modelled as an axis-aligned ellipsoid whose semi-axes come
    from the second moments of its voxels (``a**2 = 5 var`` for a solid
    ellipsoid), then re-rasterized at the scaled size.
    """
    data = np.array(data, copy=True)
    vent = ventricle_mask(data)
    if factor == 1 or not vent.any():
        return data
    brain = data > 0
    pts = np.argwhere(vent).astype(np.float64)
    center = pts.mean(axis=0)
    semi_axes = np.sqrt(5.0 * pts.var(axis=0)) * factor
    coords = np.meshgrid(*[np.arange(n, dtype=np.float64) - c for n, c in zip(data.shape, center)], indexing="ij")
    new_vent = _ellipsoid(coords, semi_axes) & brain
    tissue = data[brain & ~vent]
    fill = np.float32(tissue.mean()) if tissue.size else np.float32(TISSUE_RANGE[0])
    data[vent & ~new_vent] = fill
    data[new_vent] = VENTRICLE_INTENSITY
    return data


def make_followup(baseline, label, spec, rng):
    """Follow-up scan: ventricle rescale, boundary erosion (Decline only), voxel noise."""
    if label == DECLINE:
        factor = rng.uniform(*spec.decline_ventricle_growth)
    elif label == STABLE:
        factor = rng.uniform(*spec.stable_drift)
    else:
        raise ValueError(f"unknown label {label!r}")
    noise = rng.normal(0.0, 1.0, size=baseline.shape) * spec.noise_sigma

    data = rescale_ventricle(baseline.data, factor)
    brain = data > 0
    if label == DECLINE and spec.decline_erosion > 0:
        eroded = ndimage.binary_erosion(brain, iterations=spec.decline_erosion)
        data[brain & ~eroded] = 0.0
        brain = eroded
    data[brain] = np.clip(data[brain] + noise[brain], 0.0, 1.0)
    return Volume(data.astype(np.float32), baseline.spacing)


def _labels(spec):
    labels = np.array([STABLE] * spec.n_stable + [DECLINE] * spec.n_decline, dtype=np.int64)
    order_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xC0]))
    return labels[order_rng.permutation(len(labels))]


def iter_subjects(spec):
    """Yield one :class:`Sample` per subject, each from its own generator stream."""
    labels = _labels(spec)
    streams = np.random.SeedSequence(spec.seed).spawn(len(labels))
    width = max(4, len(str(len(labels))))
    for i, (label, stream) in enumerate(zip(labels, streams)):
        rng = np.random.default_rng(stream)
        base = make_subject(spec, rng)
        follow = make_followup(base, int(label), spec, rng)
        yield Sample(f"sub-{i + 1:0{width}d}", base, follow, int(label))


def synthesize(spec):
    """Build the whole cohort in memory."""
    return Cohort.from_samples(iter_subjects(spec))


def generate_cohort(spec, out_dir, compress=False):
    """Write one NIfTI file per scan plus ``manifest.csv``; returns (cohort, manifest path)."""
    os.makedirs(out_dir, exist_ok=True)
    ext = ".nii.gz" if compress else ".nii"
    rows = []
    samples = []
    for sample in iter_subjects(spec):
        b_name = f"{sample.subject_id}_baseline{ext}"
        f_name = f"{sample.subject_id}_followup{ext}"
        nifti.save(os.path.join(out_dir, b_name), sample.baseline)
        nifti.save(os.path.join(out_dir, f_name), sample.followup)
        rows.append(
            {"subject_id": sample.subject_id, "baseline_path": b_name, "followup_path": f_name, "label": sample.label}
        )
        samples.append(sample)
    manifest = os.path.join(out_dir, "manifest.csv")
    write_manifest(manifest, rows)
    return Cohort.from_samples(samples), manifest


def mask_volume_change(cohort):
    """Per-subject brain-mask voxel loss from baseline to follow-up."""
    return (cohort.baseline > 0).sum(axis=(1, 2, 3)) - (cohort.followup > 0).sum(axis=(1, 2, 3))


def threshold_classifier_accuracy(cohort):
    """Best accuracy of a single threshold on mask-volume loss (loss above -> Decline)."""
    change = mask_volume_change(cohort)
    labels = cohort.labels
    best = 0.0
    for t in np.unique(np.concatenate([change, [change.min() - 1]])):
        acc = np.mean((change > t).astype(np.int64) == labels)
        best = max(best, acc)
    return float(best)
