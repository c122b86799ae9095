"""Losses, metrics, Adam, the epoch loop and repeated random sub-sampling validation."""

import csv
import io
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import augment as aug
from . import model as M
from .layers import INFER, TRAIN
from .nifti import atomic_write_bytes

log = logging.getLogger(__name__)

PROB_CLIP = 1e-7
EPOCH_COLUMNS = ("epoch", "train_loss", "val_loss", "train_acc", "val_acc", "train_msle", "val_msle")


# --------------------------------------------------------------------------
# losses and metrics


def onehot(labels, classes=2):
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def _check_onehot(y):
    y = np.asarray(y)
    if y.ndim != 2 or not np.all((y == 0) | (y == 1)) or not np.all(y.sum(axis=1) == 1):
        raise ValueError("targets must be one-hot rows")
    return y


def crossentropy(probs, y):
    """Mean categorical cross-entropy with probabilities clipped to [1e-7, 1 - 1e-7]."""
    y = _check_onehot(y)
    p = np.clip(np.asarray(probs, dtype=np.float64), PROB_CLIP, 1.0 - PROB_CLIP)
    return float(-(y * np.log(p)).sum(axis=1).mean())


def crossentropy_grad_logits(probs, y):
    """Gradient of mean cross-entropy w.r.t. the logits feeding the softmax."""
    return (probs - y) / probs.shape[0]


def msle(probs, y):
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return float(np.mean((np.log1p(p) - np.log1p(y)) ** 2))


def accuracy(probs, labels):
    # argmax resolves ties to the lowest class index
    return float(np.mean(np.argmax(probs, axis=1) == np.asarray(labels)))


def l2_penalty(net, coeff):
    return float(coeff * sum(np.sum(np.square(a, dtype=np.float64)) for n, a in net.named_parameters() if M.is_kernel_weight(n)))


# --------------------------------------------------------------------------
# optimizer


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    epochs: int = 800
    batch_size: int = 20
    l2_coeff: float = None
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    n_runs: int = 10
    val_count: int = 40
    augment: bool = True
    max_rotation_deg: float = 5.0
    rotation_axis: str = "IS"
    flip_probability: float = 0.5
    eval_batch_size: int = 40
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch normalization needs it)")
        if self.epochs < 1 or self.n_runs < 1:
            raise ValueError("epochs and n_runs must be >= 1")
        if self.val_count < 1:
            raise ValueError("val_count must be >= 1")

    def augment_config(self):
        if not self.augment:
            return aug.AugmentConfig(0.0, self.rotation_axis, 0.0)
        return aug.AugmentConfig(self.max_rotation_deg, self.rotation_axis, self.flip_probability)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys {sorted(unknown)}")
        return cls(**d)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params, grads, state, cfg, l2_coeff=0.0, decay=M.is_kernel_weight):
    """One bias-corrected Adam update, in place on ``params``.

    The L2 term ``l2_coeff * ||w||^2`` contributes ``2 * l2_coeff * w`` to the
    gradient of every parameter selected by ``decay`` (kernel weights only).
    """
    if set(params) != set(grads):
        raise ValueError("params and grads name different tensors")
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {theta.shape}")
        if l2_coeff and decay(name):
            g = g + 2.0 * l2_coeff * theta
        if name not in state.m:
            state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        theta -= (cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.adam_epsilon)).astype(theta.dtype)
    return params, state


# --------------------------------------------------------------------------
# training loop


@dataclass
class RunReport:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    train_acc: list = field(default_factory=list)
    val_acc: list = field(default_factory=list)
    train_msle: list = field(default_factory=list)
    val_msle: list = field(default_factory=list)
    val_ids: list = field(default_factory=list)

    def record(self, train_metrics, val_metrics):
        for prefix, metrics in (("train", train_metrics), ("val", val_metrics)):
            for key in ("loss", "acc", "msle"):
                getattr(self, f"{prefix}_{key}").append(metrics[key])

    @property
    def epochs(self):
        return len(self.train_loss)

    def final(self):
        return {k: getattr(self, k)[-1] for k in EPOCH_COLUMNS[1:]}

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(EPOCH_COLUMNS)
        for e in range(self.epochs):
            writer.writerow([e + 1] + [repr(float(getattr(self, k)[e])) for k in EPOCH_COLUMNS[1:]])
        return buf.getvalue()


def evaluate(net, cohort, l2_coeff=0.0, batch_size=40):
    """Infer-mode loss (cross-entropy plus L2 penalty), accuracy and MSLE."""
    probs = M.predict(net, cohort.baseline, cohort.followup, batch_size)
    y = onehot(cohort.labels)
    return {
        "loss": crossentropy(probs, y) + l2_penalty(net, l2_coeff),
        "acc": accuracy(probs, cohort.labels),
        "msle": msle(probs, y),
        "probs": probs,
    }


def train_epoch(net, train_set, cfg, state, l2_coeff, shuffle_rng, aug_rng, drop_rng):
    aug_cfg = cfg.augment_config()
    params = net.parameters()
    order = shuffle_rng.permutation(len(train_set))
    for start in range(0, len(order), cfg.batch_size):
        idx = order[start : start + cfg.batch_size]
        if len(idx) < 2:
            continue
        b = np.empty((len(idx),) + train_set.volume_shape, dtype=np.float32)
        f = np.empty_like(b)
        for k, i in enumerate(idx):
            # baseline and follow-up get independent draws
            b[k] = aug.augment_array(train_set.baseline[i], aug_cfg, aug_rng)
            f[k] = aug.augment_array(train_set.followup[i], aug_cfg, aug_rng)
        probs, _, tape = M.forward_pair(net, b, f, TRAIN, drop_rng)
        y = onehot(train_set.labels[idx]).astype(probs.dtype)
        grads = M.backward_pair(net, tape, grad_logits=crossentropy_grad_logits(probs, y))
        adam_step(params, grads, state, cfg, l2_coeff)


def train_run(net, train_set, val_set, cfg, rng, progress=None):
    """Train ``net`` in place for ``cfg.epochs`` epochs and record per-epoch metrics."""
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("training and validation sets must be non-empty")
    if set(train_set.subject_ids) & set(val_set.subject_ids):
        raise ValueError("training and validation sets overlap")
    l2 = net.config.l2_coeff if cfg.l2_coeff is None else cfg.l2_coeff
    shuffle_rng, aug_rng, drop_rng = rng.spawn(3)
    state = AdamState()
    report = RunReport(val_ids=list(val_set.subject_ids))
    for epoch in range(cfg.epochs):
        train_epoch(net, train_set, cfg, state, l2, shuffle_rng, aug_rng, drop_rng)
        tr = evaluate(net, train_set, l2, cfg.eval_batch_size)
        va = evaluate(net, val_set, l2, cfg.eval_batch_size)
        report.record(tr, va)
        if progress is not None:
            progress(epoch + 1, tr, va)
    return report


# --------------------------------------------------------------------------
# repeated random sub-sampling


@dataclass
class SubsamplingResult:
    reports: list
    val_indices: list
    model_seeds: list
    models: list = field(default_factory=list)

    def summary(self):
        """Mean and (population) std of final-epoch accuracy and MSLE per split."""
        out = {}
        for split in ("train", "val"):
            acc = np.array([r.final()[f"{split}_acc"] for r in self.reports])
            err = np.array([r.final()[f"{split}_msle"] for r in self.reports])
            loss = np.array([r.final()[f"{split}_loss"] for r in self.reports])
            out[split] = {
                "mean_acc": float(acc.mean()),
                "mean_msle": float(err.mean()),
                "std_acc": float(acc.std()),
                "std_msle": float(err.std()),
                "mean_loss": float(loss.mean()),
            }
        return out

    def mean_curve(self, key):
        return np.mean([getattr(r, key) for r in self.reports], axis=0)

    def summary_csv(self):
        summary = self.summary()
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["split", "mean_acc", "mean_msle", "std_acc", "std_msle"])
        for split, label in (("train", "Training"), ("val", "Validation")):
            s = summary[split]
            writer.writerow([label] + [repr(s[k]) for k in ("mean_acc", "mean_msle", "std_acc", "std_msle")])
        return buf.getvalue()


def plan_runs(n_subjects, cfg):
    """Validation index sets and model seeds for every run, all derived from ``cfg.seed``."""
    if n_subjects <= cfg.val_count:
        raise ValueError(f"need more than {cfg.val_count} subjects, got {n_subjects}")
    plans = []
    for child in np.random.SeedSequence(cfg.seed).spawn(cfg.n_runs):
        split_seq, train_seq, model_seq = child.spawn(3)
        split_rng = np.random.default_rng(split_seq)
        val = np.sort(split_rng.choice(n_subjects, size=cfg.val_count, replace=False))
        model_seed = int(model_seq.generate_state(1)[0])
        plans.append((val, model_seed, train_seq))
    return plans


def _one_run(cohort, model_cfg, cfg, val, model_seed, train_seq, keep_model, tag=None):
    mask = np.zeros(len(cohort), dtype=bool)
    mask[val] = True
    train_set = cohort.subset(np.flatnonzero(~mask))
    val_set = cohort.subset(np.flatnonzero(mask))
    net = M.build(replace(model_cfg, seed=model_seed))

    def progress(epoch, tr, va):
        if epoch == 1 or epoch % 10 == 0 or epoch == cfg.epochs:
            log.info(
                "%s epoch %d: train loss %.4f acc %.3f | val loss %.4f acc %.3f msle %.4f",
                tag or "run", epoch, tr["loss"], tr["acc"], va["loss"], va["acc"], va["msle"],
            )

    report = train_run(net, train_set, val_set, cfg, np.random.default_rng(train_seq), progress)
    return report, (net if keep_model else None)


def subsampling_validation(cohort, model_cfg, cfg, threads=1, keep_models=False):
    """``cfg.n_runs`` fresh trainings, each validated on ``cfg.val_count`` random subjects.

    Runs are independent and seeded individually, so results do not depend on
    ``threads``.
    """
    model_cfg = replace(model_cfg, input_shape=cohort.volume_shape)
    plans = plan_runs(len(cohort), cfg)
    jobs = [
        (cohort, model_cfg, cfg, val, seed, seq, keep_models, f"run {k + 1}/{cfg.n_runs}")
        for k, (val, seed, seq) in enumerate(plans)
    ]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(threads, len(jobs))) as pool:
            results = list(pool.map(_one_run, *zip(*jobs)))
    else:
        results = [_one_run(*job) for job in jobs]
    return SubsamplingResult(
        reports=[r for r, _ in results],
        val_indices=[val for val, _, _ in plans],
        model_seeds=[seed for _, seed, _ in plans],
        models=[n for _, n in results] if keep_models else [],
    )


def write_run_outputs(out_dir, result):
    """Per-run epoch CSVs, the summary table CSV, and one checkpoint per kept model."""
    os.makedirs(out_dir, exist_ok=True)
    for k, report in enumerate(result.reports):
        atomic_write_bytes(os.path.join(out_dir, f"run_{k + 1:02d}_epochs.csv"), report.to_csv().encode())
    atomic_write_bytes(os.path.join(out_dir, "summary.csv"), result.summary_csv().encode())
    mean = io.StringIO()
    writer = csv.writer(mean, lineterminator="\n")
    writer.writerow(EPOCH_COLUMNS)
    curves = [result.mean_curve(k) for k in EPOCH_COLUMNS[1:]]
    for e in range(len(curves[0])):
        writer.writerow([e + 1] + [repr(float(c[e])) for c in curves])
    atomic_write_bytes(os.path.join(out_dir, "mean_epochs.csv"), mean.getvalue().encode())
    for k, net in enumerate(result.models):
        M.save_checkpoint(os.path.join(out_dir, f"run_{k + 1:02d}.ckpt"), net)
