"""Longitudinal samples, cohorts, and the manifest CSV that indexes them on disk."""

import csv
import io
import os
from dataclasses import dataclass

import numpy as np

from . import nifti
from .nifti import Volume

STABLE = 0
DECLINE = 1
LABEL_NAMES = {STABLE: "Stable", DECLINE: "Decline"}
MANIFEST_FIELDS = ("subject_id", "baseline_path", "followup_path", "label")


class ManifestError(ValueError):
    pass


@dataclass
class Sample:
    subject_id: str
    baseline: Volume
    followup: Volume
    label: int

    def __post_init__(self):
        if self.baseline.shape != self.followup.shape:
            raise ValueError(f"{self.subject_id}: baseline/follow-up shapes differ")
        if self.label not in (STABLE, DECLINE):
            raise ValueError(f"{self.subject_id}: label must be 0 or 1")


class Cohort:
    """Ordered collection of samples stored as stacked arrays.

    ``baseline`` and ``followup`` are ``[S, X, Y, Z]`` float32 arrays; ``labels``
    is an int array of 0 (Stable) / 1 (Decline).
    """

    def __init__(self, subject_ids, baseline, followup, labels, spacing=(1.0, 1.0, 1.0)):
        self.subject_ids = [str(s) for s in subject_ids]
        self.baseline = np.asarray(baseline, dtype=np.float32)
        self.followup = np.asarray(followup, dtype=np.float32)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.spacing = tuple(float(s) for s in spacing)
        n = len(self.subject_ids)
        if self.baseline.shape != self.followup.shape or self.baseline.ndim != 4:
            raise ValueError("baseline and follow-up must be matching [S, X, Y, Z] stacks")
        if self.baseline.shape[0] != n or self.labels.shape != (n,):
            raise ValueError("subject ids, volumes and labels disagree in length")
        if np.any((self.labels != STABLE) & (self.labels != DECLINE)):
            raise ValueError("labels must be 0 or 1")

    @classmethod
    def from_samples(cls, samples):
        samples = list(samples)
        if not samples:
            raise ValueError("empty cohort")
        return cls(
            [s.subject_id for s in samples],
            np.stack([s.baseline.data for s in samples]),
            np.stack([s.followup.data for s in samples]),
            [s.label for s in samples],
            samples[0].baseline.spacing,
        )

    def __len__(self):
        return len(self.subject_ids)

    @property
    def volume_shape(self):
        return self.baseline.shape[1:]

    def sample(self, i):
        return Sample(
            self.subject_ids[i],
            Volume(self.baseline[i], self.spacing),
            Volume(self.followup[i], self.spacing),
            int(self.labels[i]),
        )

    def __iter__(self):
        for i in range(len(self)):
            yield self.sample(i)

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return Cohort(
            [self.subject_ids[i] for i in indices],
            self.baseline[indices],
            self.followup[indices],
            self.labels[indices],
            self.spacing,
        )

    def equals(self, other):
        return (
            self.subject_ids == other.subject_ids
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.baseline, other.baseline)
            and np.array_equal(self.followup, other.followup)
            and self.spacing == other.spacing
        )


def manifest_text(rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MANIFEST_FIELDS)
    for row in rows:
        writer.writerow([row[k] for k in MANIFEST_FIELDS])
    return buf.getvalue()


def write_manifest(path, rows):
    nifti.atomic_write_bytes(path, manifest_text(rows).encode("utf-8"))


def read_manifest(path):
    """Parse a manifest; relative volume paths resolve against its directory."""
    base = os.path.dirname(os.path.abspath(path))
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            header = reader.fieldnames or []
            missing = [k for k in MANIFEST_FIELDS if k not in header]
            if missing:
                raise ManifestError(f"{path}: manifest lacks columns {missing}")
            rows = []
            for lineno, row in enumerate(reader, start=2):
                if any(row.get(k) in (None, "") for k in MANIFEST_FIELDS):
                    raise ManifestError(f"{path}:{lineno}: incomplete row")
                try:
                    label = int(row["label"])
                except ValueError:
                    raise ManifestError(f"{path}:{lineno}: label {row['label']!r} is not 0/1") from None
                if label not in (STABLE, DECLINE):
                    raise ManifestError(f"{path}:{lineno}: label {label} is not 0/1")
                entry = {k: row[k] for k in header if row.get(k) not in (None, "")}
                entry["label"] = label
                for key in list(entry):
                    if key.endswith("_path") or key.endswith("_mask"):
                        entry[key] = os.path.join(base, entry[key])
                rows.append(entry)
    except UnicodeDecodeError as exc:
        raise ManifestError(f"{path}: not a text manifest ({exc})") from None
    if not rows:
        raise ManifestError(f"{path}: manifest has no rows")
    return rows


def load_cohort(path):
    rows = read_manifest(path)
    samples = []
    for row in rows:
        samples.append(
            Sample(
                row["subject_id"],
                nifti.load(row["baseline_path"]),
                nifti.load(row["followup_path"]),
                row["label"],
            )
        )
    shapes = {s.baseline.shape for s in samples}
    if len(shapes) != 1:
        raise ManifestError(f"{path}: volumes have differing shapes {sorted(shapes)}")
    return Cohort.from_samples(samples)
