"""Exact t-SNE for small point sets, plus per-stage embeddings of a trained model.

Distances are Euclidean on flattened feature vectors.  The optimizer is the
classic one: early exaggeration, momentum switch, and per-coordinate adaptive
gains.  Initialization is drawn point by point from the seeded generator, so
the result depends on input order.
"""

import csv
import io
import os
import warnings
from dataclasses import dataclass

import numpy as np

from . import model as M
from .nifti import atomic_write_bytes

STAGE_COLUMNS = ("x", "y", "label", "predicted", "correct")
_ENTROPY_TOL = 1e-10
_MAX_SEARCH = 200


@dataclass(frozen=True)
class TsneConfig:
    perplexity: float = 30.0
    iterations: int = 1000
    early_exaggeration: float = 12.0
    exaggeration_iterations: int = 250
    step_size: float = 200.0
    momentum: float = 0.5
    final_momentum: float = 0.8
    min_gain: float = 0.01
    init_sigma: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.perplexity < 2:
            raise ValueError("perplexity must be >= 2")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.step_size <= 0 or self.early_exaggeration < 1:
            raise ValueError("step_size must be positive and early_exaggeration >= 1")

    def effective_perplexity(self, n):
        return min(self.perplexity, (n - 1) / 3.0)


@dataclass
class Embedding:
    coords: np.ndarray  # [n, 2]
    final_kl: float
    exaggeration_kl: float  # KL(P || Q) when exaggeration ends
    perplexity: float
    labels: np.ndarray = None
    predicted: np.ndarray = None

    @property
    def correct(self):
        if self.labels is None or self.predicted is None:
            return None
        return self.labels == self.predicted

    def to_csv(self):
        n = len(self.coords)
        labels = self.labels if self.labels is not None else np.full(n, -1)
        predicted = self.predicted if self.predicted is not None else np.full(n, -1)
        correct = self.correct if self.correct is not None else np.zeros(n, dtype=bool)
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(STAGE_COLUMNS)
        for (x, y), lab, pred, ok in zip(self.coords, labels, predicted, correct):
            writer.writerow([repr(float(x)), repr(float(y)), int(lab), int(pred), int(bool(ok))])
        return buf.getvalue()


def squared_distances(x):
    x = np.asarray(x, dtype=np.float64)
    sq = np.sum(x * x, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.fill_diagonal(d2, 0.0)
    return np.maximum(d2, 0.0)


def _row_distribution(d2_row, beta):
    # shift by the smallest distance so exp() cannot underflow to all zeros
    w = np.exp(-(d2_row - d2_row.min()) * beta)
    total = w.sum()
    p = w / total
    entropy = beta * np.sum(p * (d2_row - d2_row.min())) + np.log(total)
    return p, entropy


def conditional_affinities(vectors, perplexity):
    """Rows ``p_{j|i}`` with each row's perplexity matched by bisection on its precision.

    Returns ``(P_cond, betas)`` where ``beta_i = 1 / (2 sigma_i^2)``.
    """
    x = np.asarray(vectors, dtype=np.float64)
    n = x.shape[0]
    if n < 3:
        raise ValueError("need at least 3 points")
    if not 1.0 <= perplexity <= n - 1:
        raise ValueError(f"perplexity must lie in [1, {n - 1}] for {n} points")
    d2 = squared_distances(x)
    target = np.log(perplexity)
    cond = np.zeros((n, n))
    betas = np.empty(n)
    for i in range(n):
        row = np.delete(d2[i], i)
        beta, lo, hi = 1.0, 0.0, np.inf
        for _ in range(_MAX_SEARCH):
            p, h = _row_distribution(row, beta)
            if abs(h - target) < _ENTROPY_TOL:
                break
            if h > target:
                lo = beta
                beta = beta * 2.0 if hi == np.inf else 0.5 * (beta + hi)
            else:
                hi = beta
                beta = 0.5 * (beta + lo)
        cond[i, np.arange(n) != i] = p
        betas[i] = beta
    return cond, betas


def row_perplexity(cond):
    """Perplexity ``exp(H)`` of every conditional row."""
    p = np.where(cond > 0, cond, 1.0)
    return np.exp(-np.sum(cond * np.log(p), axis=1))


def _dedupe(x, seed):
    d2 = squared_distances(x)
    np.fill_diagonal(d2, np.inf)
    if np.any(d2 == 0):
        warnings.warn("duplicate points found; adding 1e-10 jitter", RuntimeWarning, stacklevel=3)
        x = x + np.random.default_rng(seed).normal(0.0, 1e-10, size=x.shape)
    return x


def input_affinities(vectors, perplexity, seed=0):
    """Symmetrized joint affinities ``P``; symmetric, non-negative, summing to 1."""
    x = _dedupe(np.asarray(vectors, dtype=np.float64), seed)
    cond, _ = conditional_affinities(x, perplexity)
    return (cond + cond.T) / (2.0 * x.shape[0])


def student_t_affinities(y):
    """Low-dimensional joint affinities ``Q`` and the kernel ``1 / (1 + d^2)``."""
    num = 1.0 / (1.0 + squared_distances(y))
    np.fill_diagonal(num, 0.0)
    return num / num.sum(), num


def kl_divergence(p, q):
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / np.maximum(q[mask], 1e-300))))


def _gradient(p, y):
    q, num = student_t_affinities(y)
    w = (p - q) * num
    return 4.0 * (np.sum(w, axis=1)[:, None] * y - w @ y)


def tsne(vectors, cfg=None, labels=None, predicted=None):
    """Embed ``[n, d]`` vectors in 2D by gradient descent on ``KL(P || Q)``."""
    cfg = cfg or TsneConfig()
    x = np.asarray(vectors, dtype=np.float64).reshape(len(vectors), -1)
    n = x.shape[0]
    if n < 4:
        raise ValueError("t-SNE needs at least 4 points")
    perplexity = cfg.effective_perplexity(n)
    p = input_affinities(x, perplexity, cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    y = rng.normal(0.0, cfg.init_sigma, size=(n, 2))
    update = np.zeros_like(y)
    gains = np.ones_like(y)
    exaggeration_kl = None
    for it in range(cfg.iterations):
        exaggerating = it < cfg.exaggeration_iterations
        momentum = cfg.momentum if exaggerating else cfg.final_momentum
        grad = _gradient(p * cfg.early_exaggeration if exaggerating else p, y)
        same = np.sign(grad) == np.sign(update)
        gains = np.where(same, gains * 0.8, gains + 0.2)
        np.maximum(gains, cfg.min_gain, out=gains)
        update = momentum * update - cfg.step_size * gains * grad
        y = y + update
        y -= y.mean(axis=0)
        if it + 1 == cfg.exaggeration_iterations:
            exaggeration_kl = kl_divergence(p, student_t_affinities(y)[0])
    final_kl = kl_divergence(p, student_t_affinities(y)[0])
    if exaggeration_kl is None:
        exaggeration_kl = final_kl
    return Embedding(
        coords=y,
        final_kl=final_kl,
        exaggeration_kl=exaggeration_kl,
        perplexity=perplexity,
        labels=None if labels is None else np.asarray(labels),
        predicted=None if predicted is None else np.asarray(predicted),
    )


def knn_purity(coords, labels, k=5):
    """Mean fraction of each point's ``k`` nearest neighbours (self excluded) sharing its label."""
    labels = np.asarray(labels)
    d2 = squared_distances(coords)
    np.fill_diagonal(d2, np.inf)
    nearest = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return float(np.mean(labels[nearest] == labels[:, None]))


def embed_stages(net, cohort, cfg=None, out_dir=None):
    """t-SNE of the infer-mode features at each of the four network stages.

    Returns ``{stage: Embedding}``; with ``out_dir`` also writes ``<stage>.csv``.
    """
    if len(cohort) < 10:
        raise ValueError("need at least 10 samples to embed")
    cfg = cfg or TsneConfig()
    predicted = np.argmax(M.predict(net, cohort.baseline, cohort.followup), axis=1)
    out = {}
    for stage in M.STAGES:
        features = M.extract_features(net, cohort.baseline, cohort.followup, stage)
        out[stage] = tsne(features, cfg, labels=cohort.labels, predicted=predicted)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        for stage, emb in out.items():
            atomic_write_bytes(os.path.join(out_dir, f"{stage}.csv"), emb.to_csv().encode())
    return out
