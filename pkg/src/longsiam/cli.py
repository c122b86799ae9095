"""Command-line entry point: ``longsiam {synth,preprocess,train,eval,embed}``.

Every command writes into a hidden staging directory next to its output and
renames it into place only on success, so a failed or interrupted command
leaves nothing behind.  Heavy imports happen inside the commands so that
``--deterministic`` can pin the BLAS thread pools before numpy loads.
"""

import argparse
import json
import logging
import os
import shutil
import sys
import tempfile
from contextlib import contextmanager
from dataclasses import asdict

log = logging.getLogger("longsiam")

THREADS_ENV = "LONGSIAM_THREADS"
BLAS_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")
CONFIG_SECTIONS = ("model", "train")


class CliError(Exception):
    pass


def resolve_threads(requested):
    if requested is None:
        env = os.environ.get(THREADS_ENV)
        if env is None:
            return os.cpu_count() or 1
        try:
            requested = int(env)
        except ValueError:
            raise CliError(f"{THREADS_ENV}={env!r} is not an integer") from None
    if requested < 1:
        raise CliError("thread count must be >= 1")
    return requested


@contextmanager
def staged_dir(out_dir):
    """Yield a temp directory that replaces ``out_dir`` when the block succeeds."""
    out_dir = os.path.abspath(out_dir)
    if os.path.exists(out_dir) and (not os.path.isdir(out_dir) or os.listdir(out_dir)):
        raise CliError(f"output {out_dir} already exists and is not an empty directory")
    parent = os.path.dirname(out_dir)
    os.makedirs(parent, exist_ok=True)
    tmp = tempfile.mkdtemp(dir=parent, prefix=f".tmp-{os.path.basename(out_dir)}-")
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    os.chmod(tmp, 0o755)
    if os.path.isdir(out_dir):
        os.rmdir(out_dir)
    os.replace(tmp, out_dir)


def _write_json(path, obj):
    from .nifti import atomic_write_bytes

    atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def load_config(path):
    """``{"model": {...}, "train": {...}}``; either section may be omitted."""
    if path is None:
        return {"model": {}, "train": {}}
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise CliError(f"{path}: config must be a JSON object")
    unknown = set(raw) - set(CONFIG_SECTIONS)
    if unknown:
        raise CliError(f"{path}: unknown config sections {sorted(unknown)}")
    return {k: dict(raw.get(k, {})) for k in CONFIG_SECTIONS}


# --------------------------------------------------------------------------
# commands


def cmd_synth(args):
    from . import synth

    overrides = {"seed": args.seed}
    for key in ("n_stable", "n_decline", "noise_sigma"):
        if getattr(args, key) is not None:
            overrides[key] = getattr(args, key)
    spec = synth.CohortSpec.preset(args.preset, **overrides)
    if args.null:
        spec = spec.null_control()
    with staged_dir(args.out) as tmp:
        cohort, _ = synth.generate_cohort(spec, tmp, compress=args.gzip)
        _write_json(os.path.join(tmp, "cohort_spec.json"), spec.to_dict())
    log.info("wrote %d pairs of %s volumes to %s", len(cohort), "x".join(map(str, spec.volume_shape)), args.out)
    return 0


def cmd_preprocess(args):
    from . import nifti, preprocess
    from .cohort import read_manifest, write_manifest

    rows = read_manifest(args.manifest)
    target = tuple(args.target)
    ext = ".nii.gz" if args.gzip else ".nii"
    with staged_dir(args.out) as tmp:
        out_rows = []
        for row in rows:
            masks = tuple(
                nifti.load(row[key]) if key in row else None for key in ("baseline_mask", "followup_mask")
            )
            b, f = preprocess.preprocess_pair(
                nifti.load(row["baseline_path"]), nifti.load(row["followup_path"]), target, masks, args.align
            )
            names = {}
            for key, vol in (("baseline_path", b), ("followup_path", f)):
                names[key] = f"{row['subject_id']}_{key.split('_')[0]}{ext}"
                nifti.save(os.path.join(tmp, names[key]), vol)
            out_rows.append({"subject_id": row["subject_id"], "label": row["label"], **names})
        write_manifest(os.path.join(tmp, "manifest.csv"), out_rows)
        _write_json(os.path.join(tmp, "config.json"), {"target": list(target), "align": args.align})
    log.info("preprocessed %d pairs to %s", len(rows), args.out)
    return 0


def resolve_train_config(args, volume_shape):
    from .model import ModelConfig
    from .training import TrainConfig

    cfg = load_config(args.config)
    train = cfg["train"]
    for flag, key in (("epochs", "epochs"), ("runs", "n_runs"), ("seed", "seed"), ("batch_size", "batch_size"),
                      ("learning_rate", "learning_rate")):
        value = getattr(args, flag)
        if value is not None:
            train[key] = value
    model = cfg["model"]
    if args.seed is not None:
        model["seed"] = args.seed
    model["input_shape"] = list(volume_shape)
    try:
        return ModelConfig.from_dict(model), TrainConfig.from_dict(train)
    except TypeError as exc:
        raise CliError(f"bad config: {exc}") from None


def cmd_train(args):
    from . import cohort as C
    from . import training

    rows = C.read_manifest(args.manifest)
    cohort = C.load_cohort(args.manifest)
    model_cfg, train_cfg = resolve_train_config(args, cohort.volume_shape)
    threads = resolve_threads(args.threads)
    out_final = os.path.abspath(args.out)
    with staged_dir(args.out) as tmp:
        _write_json(
            os.path.join(tmp, "config.json"),
            {"model": model_cfg.to_dict(), "train": train_cfg.to_dict(), "manifest": os.path.abspath(args.manifest)},
        )
        result = training.subsampling_validation(cohort, model_cfg, train_cfg, threads=threads, keep_models=True)
        training.write_run_outputs(tmp, result)
        for k, val in enumerate(result.val_indices):
            val_rows = []
            for i in val:
                row = dict(rows[i])
                for key in ("baseline_path", "followup_path"):
                    row[key] = os.path.relpath(row[key], out_final)
                val_rows.append(row)
            C.write_manifest(os.path.join(tmp, f"run_{k + 1:02d}_val_manifest.csv"), val_rows)
    s = result.summary()["val"]
    log.info("validation accuracy %.3f +- %.3f, MSLE %.4f +- %.4f", s["mean_acc"], s["std_acc"], s["mean_msle"], s["std_msle"])
    return 0


def cmd_eval(args):
    from . import cohort as C
    from . import model as M
    from . import training

    cohort = C.load_cohort(args.manifest)
    net = M.load_checkpoint(args.checkpoint)
    if cohort.volume_shape != net.config.input_shape:
        raise CliError(f"volumes are {cohort.volume_shape} but the model expects {net.config.input_shape}")
    probs = M.predict(net, cohort.baseline, cohort.followup)
    y = training.onehot(cohort.labels)
    metrics = {
        "accuracy": training.accuracy(probs, cohort.labels),
        "msle": training.msle(probs, y),
        "crossentropy": training.crossentropy(probs, y),
        "n": len(cohort),
    }
    text = json.dumps(metrics, indent=2, sort_keys=True) + "\n"
    if args.out:
        from .nifti import atomic_write_bytes

        atomic_write_bytes(args.out, text.encode())
    else:
        sys.stdout.write(text)
    return 0


def cmd_embed(args):
    from . import cohort as C
    from . import model as M
    from . import tsne

    cohort = C.load_cohort(args.manifest)
    net = M.load_checkpoint(args.checkpoint)
    if cohort.volume_shape != net.config.input_shape:
        raise CliError(f"volumes are {cohort.volume_shape} but the model expects {net.config.input_shape}")
    kwargs = {"seed": args.seed}
    for key in ("perplexity", "iterations"):
        if getattr(args, key) is not None:
            kwargs[key] = getattr(args, key)
    cfg = tsne.TsneConfig(**kwargs)
    with staged_dir(args.out) as tmp:
        embeddings = tsne.embed_stages(net, cohort, cfg, out_dir=tmp)
        _write_json(os.path.join(tmp, "config.json"), {"tsne": asdict(cfg), "checkpoint": os.path.abspath(args.checkpoint)})
    for stage, emb in embeddings.items():
        log.info("%s: KL %.4f, 5-NN label purity %.3f", stage, emb.final_kl, tsne.knn_purity(emb.coords, emb.labels))
    return 0


# --------------------------------------------------------------------------
# argument parsing


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    common.add_argument("--threads", type=int, default=None, help=f"worker processes (default ${THREADS_ENV} or all cores)")
    common.add_argument("--deterministic", action="store_true", help="pin BLAS to one thread for bit-reproducible runs")
    parser = argparse.ArgumentParser(prog="longsiam", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic longitudinal cohort")
    p.add_argument("--out", required=True)
    p.add_argument("--preset", choices=("full", "desk"), default="full")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-stable", type=int)
    p.add_argument("--n-decline", type=int)
    p.add_argument("--noise-sigma", type=float)
    p.add_argument("--null", action="store_true", help="switch the disease signal off")
    p.add_argument("--gzip", action="store_true", help="write .nii.gz")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", parents=[common], help="mask, scale, pad and downscale every pair of a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--target", type=int, nargs=3, default=(102, 108, 75), metavar=("X", "Y", "Z"))
    p.add_argument("--align", choices=("center", "corner"), default="center")
    p.add_argument("--gzip", action="store_true")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", parents=[common], help="repeated random sub-sampling training")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help='JSON file with optional "model" and "train" sections')
    p.add_argument("--epochs", type=int)
    p.add_argument("--runs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="accuracy and MSLE of a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="write metrics JSON here instead of stdout")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("embed", parents=[common], help="t-SNE of the four feature stages")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--perplexity", type=float)
    p.add_argument("--iterations", type=int)
    p.set_defaults(func=cmd_embed)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.deterministic:
        # only effective when numpy has not been imported yet in this process
        for var in BLAS_THREAD_VARS:
            os.environ[var] = "1"
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except (CliError, ValueError, OSError) as exc:
        print(f"longsiam: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
