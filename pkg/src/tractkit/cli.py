"""``tractkit`` command line.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numeric
failure (non-finite loss, failed gradient check, degenerate tracking).
All distances and radii are millimeters.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from .errors import DegenerateConfigError, FormatError, NumericError, WeightsError
from .metric import DEFAULT_POINTS, DEFAULT_RADIUS_MM, compare
from .report import (
    aggregate, file_sha256, read_report, summarize, write_cohort_csv, write_colored, write_outliers,
    write_report,
)
from .tracts import load_tractogram, sample, write_seeds, write_tck
from .volumes import read_nifti, write_nifti

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
GRADCHECK_TOLERANCE = 1e-3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _dump(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_json(path):
    if path is None:
        return {}
    with open(path) as fh:
        return json.load(fh)


def _echo(args):
    """Reproducible argument echo (no handler function, no timestamps)."""
    return {k: v for k, v in sorted(vars(args).items()) if k != "func" and not k.startswith("_")}


def _threads(args):
    return args.threads if args.threads else (os.cpu_count() or 1)


# --------------------------------------------------------------------------
# compare / aggregate
# --------------------------------------------------------------------------


def cmd_compare(args):
    A = load_tractogram(args.a, args.seeds_a)
    B = load_tractogram(args.b, args.seeds_b)
    if args.sample is not None:
        for name, t in (("A", A), ("B", B)):
            if args.sample > len(t):
                raise ValueError(f"--sample {args.sample} exceeds the {len(t)} streamlines of {name}")
        A = sample(A, args.sample, args.seed)
        B = sample(B, args.sample, args.seed + 1)
    results = compare(A, B, args.radius_mm, args.points, workers=_threads(args))
    stats = summarize(results, args.bin_width, name=args.name or f"{args.a} -> {args.b}")
    config = _echo(args)
    config.update({"radius_mm": args.radius_mm, "sha256_a": file_sha256(args.a), "sha256_b": file_sha256(args.b)})
    config.pop("threads", None)  # results do not depend on it
    write_report({"pair": stats}, args.out, config)
    if args.export_outliers:
        write_outliers(A, results, args.export_outliers)
    if args.export_colors:
        write_colored(A, results, args.export_colors)
    mean = "undefined" if stats.mean_mm is None else f"{stats.mean_mm:.6f}"
    print(f"queries {stats.n_queries}  mean {mean} mm  outliers {100 * stats.outlier_fraction:.4f} %")
    return EXIT_OK


def cmd_aggregate(args):
    per, names, hashes = [], [], {}
    for path in args.reports:
        stats, _ = read_report(path)
        pair = stats.get("pair") if isinstance(stats, dict) else stats
        if pair is None:
            raise FormatError(f"{path}: report holds no pair statistics")
        per.append(pair)
        names.append(path)
        hashes[path] = file_sha256(path)
    cohort = aggregate(per, names)
    config = {"inputs": list(args.reports), "sha256": hashes, "pair_name": args.pair_name}
    if args.out.endswith(".csv"):
        write_cohort_csv([(args.pair_name, cohort)], args.out)
    else:
        write_report({"cohort": cohort}, args.out, config)
    if args.csv:
        write_cohort_csv([(args.pair_name, cohort)], args.csv)
    print(f"subjects {cohort.n_subjects}  mean of means {cohort.mean_of_means_mm:.6f} mm  "
          f"mean of medians {cohort.mean_of_medians_mm:.6f} mm  outliers {cohort.average_outlier_percent:.4f} %")
    return EXIT_OK


# --------------------------------------------------------------------------
# tracking
# --------------------------------------------------------------------------


def cmd_track(args):
    from .model import load_weights
    from .tracking import FieldPredictor, RecurrentPredictor, TrackingConfig, generate_tractogram

    if bool(args.weights) == bool(args.field):
        raise UsageError("give exactly one of --weights or --field")
    file_cfg = _load_json(args.config)
    overrides = {"target_count": args.count, "rng_seed": args.seed, "batch_size": args.batch_size,
                 "warmup_discard": args.warmup_discard}
    cfg = TrackingConfig.from_dict({**TrackingConfig().to_dict(), **file_cfg,
                                    **{k: v for k, v in overrides.items() if v is not None}})
    mask = read_nifti(args.mask)
    seed_mask = read_nifti(args.seed_mask) if args.seed_mask else mask
    if args.field:
        pred = FieldPredictor(read_nifti(args.field), cfg.step_size, args.integrator)
    else:
        if not args.volume:
            raise UsageError("--weights needs --volume (features for a teacher, context for a student)")
        pred = RecurrentPredictor(load_weights(args.weights), read_nifti(args.volume))
    tract, log = generate_tractogram(pred, cfg, mask, seed_mask)
    write_tck(tract, args.out)
    write_seeds(tract, os.path.splitext(args.out)[0] + ".seeds.txt")
    log["args"] = _echo(args)
    log["args"].pop("threads", None)
    _dump(log, args.log or os.path.splitext(args.out)[0] + ".log.json")
    print(f"kept {len(tract)} streamlines in {len(log['batches'])} batches")
    return EXIT_OK


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


def _subjects(root, need_context):
    if not os.path.isdir(root):
        raise FileNotFoundError(f"missing subject directory {root}")
    out = []
    for name in sorted(os.listdir(root)):
        d = os.path.join(root, name)
        if not os.path.isdir(d):
            continue
        feats = read_nifti(os.path.join(d, "features.nii"))
        tract = load_tractogram(os.path.join(d, "truth.tck"))
        if need_context:
            out.append((read_nifti(os.path.join(d, "context.nii")), feats, tract))
        else:
            out.append((feats, tract))
    if not out:
        raise FileNotFoundError(f"no subject directories under {root}")
    return out


def _train_cfg(args):
    from .training import TrainConfig

    d = {**TrainConfig().to_dict(), **_load_json(args.config).get("train", {})}
    for key, val in (("epochs", args.epochs), ("rng_seed", args.seed), ("lambda_contrastive", getattr(args, "lam", None))):
        if val is not None:
            d[key] = val
    return TrainConfig.from_dict(d)


def _resume(args, role):
    from .model import load_weights
    from .training import load_adam_state

    if not args.resume:
        return None, None
    adam_path = args.resume + ".adam.npz"
    if not os.path.exists(adam_path):
        raise FileNotFoundError(f"cannot resume: optimizer state {adam_path} not found")
    return load_weights(args.resume, role=role), load_adam_state(adam_path)


def _finish_training(args, result, train_cfg, role, model_cfg):
    from .model import save_weights
    from .training import save_adam_state

    save_weights(result.weights, args.out)
    save_adam_state(result.adam_state, args.out + ".adam.npz")
    result.write_curves(args.loss_csv or args.out + ".loss.csv")
    _dump({"role": role, "model": model_cfg.to_dict(), "train": train_cfg.to_dict(), "args": _echo(args),
           "best_epoch": result.best_epoch, "best_val_loss": result.best_val_loss,
           "epochs_run": len(result.val_curve), "stopped_early": result.stopped_early}, args.out + ".train.json")
    print(f"best epoch {result.best_epoch}  validation loss {result.best_val_loss:.6f}")
    return EXIT_OK


def cmd_train_teacher(args):
    from .model import ModelConfig
    from .training import train_teacher

    train = _subjects(os.path.join(args.data_dir, "train"), False)
    val = _subjects(os.path.join(args.data_dir, "val"), False)
    cfg = _train_cfg(args)
    init, state = _resume(args, "teacher")
    if init is not None:
        model_cfg = init.config
    else:
        m = _load_json(args.config).get("model", {})
        model_cfg = ModelConfig.from_dict({**ModelConfig.desk().to_dict(), "c_in": train[0][0].channels, **m})
    result = train_teacher(train, val, model_cfg, cfg, init=init, adam_state=state)
    return _finish_training(args, result, cfg, "teacher", result.weights.config)


def cmd_train_student(args):
    from .model import load_weights
    from .training import train_student

    train = _subjects(os.path.join(args.data_dir, "train"), True)
    val = _subjects(os.path.join(args.data_dir, "val"), True)
    cfg = _train_cfg(args)
    teacher = load_weights(args.teacher, role="teacher")
    init, state = _resume(args, "student")
    result = train_student(train, val, teacher, cfg, context_channels=train[0][0].channels,
                           init=init, adam_state=state)
    return _finish_training(args, result, cfg, "student", result.weights.config)


# --------------------------------------------------------------------------
# phantom / gradcheck
# --------------------------------------------------------------------------


def cmd_phantom(args):
    from .phantom import PhantomSpec, build

    d = _load_json(args.spec)
    if args.kind:
        d = {**PhantomSpec.default(args.kind).to_dict(), **d, "kind": args.kind}
    elif "kind" in d:
        d = {**PhantomSpec.default(d["kind"]).to_dict(), **d}
    if args.seed is not None:
        d["rng_seed"] = args.seed
    spec = PhantomSpec.from_dict(d)
    p = build(spec)
    os.makedirs(args.out, exist_ok=True)
    write_nifti(p.field, os.path.join(args.out, "field.nii"))
    write_nifti(p.mask, os.path.join(args.out, "mask.nii"))
    write_nifti(p.features, os.path.join(args.out, "features.nii"))
    write_nifti(p.context, os.path.join(args.out, "context.nii"))
    write_tck(p.truth, os.path.join(args.out, "truth.tck"))
    write_seeds(p.truth, os.path.join(args.out, "truth.seeds.txt"))
    with open(os.path.join(args.out, "phantom.json"), "w") as fh:
        fh.write(spec.to_json() + "\n")
    print(f"{spec.kind} phantom with {len(p.truth)} truth streamlines written to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args):
    from .model import ModelConfig
    from .training import grad_check

    cfg = ModelConfig.from_dict({**ModelConfig.tiny().to_dict(), **_load_json(args.config).get("model", {})})
    corrupt = None
    if args.corrupt_gradient:
        def corrupt(grads):
            name = sorted(k for k in grads if k.endswith("decoder.weight"))[0]
            grads[name] = grads[name] * 1.5
            return grads
    worst = 0.0
    for role in (["teacher", "student"] if args.role == "both" else [args.role]):
        for seed in args.seeds:
            err, per = grad_check(cfg, seed, role, args.h, corrupt)
            name = max(per, key=per.get)
            print(f"{role} seed {seed}: max relative error {err:.3e} ({name})")
            worst = max(worst, err)
    print(f"max relative error {worst:.3e}")
    return EXIT_OK if worst < GRADCHECK_TOLERANCE else EXIT_NUMERIC


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="tractkit", description="Streamline tractography toolkit.")
    p.add_argument("--version", action="version", version=f"tractkit {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def threads(sp):
        sp.add_argument("--threads", type=int, default=None,
                        help="worker threads for the metric (default: all cores); results do not depend on it")

    c = sub.add_parser("compare", help="epsilon-ball metric of A against B")
    c.add_argument("a", help="query tractogram A (.tck)")
    c.add_argument("b", help="target tractogram B (.tck)")
    c.add_argument("--seeds-a", help="seed sidecar for A (default: A.seeds.txt if present)")
    c.add_argument("--seeds-b", help="seed sidecar for B")
    c.add_argument("--radius-mm", type=float, default=DEFAULT_RADIUS_MM)
    c.add_argument("--points", type=int, default=DEFAULT_POINTS, help="resampling point count K")
    c.add_argument("--sample", type=int, default=None, help="sample N streamlines from each input")
    c.add_argument("--seed", type=int, default=0, help="sampling rng seed")
    c.add_argument("--bin-width", type=float, default=0.25, help="histogram bin width (mm)")
    c.add_argument("--name", default=None, help="pair label stored in the report")
    c.add_argument("--out", required=True, help="report JSON path")
    c.add_argument("--export-outliers", metavar="PREFIX", help="write PREFIX.tck and PREFIX.idx.txt")
    c.add_argument("--export-colors", metavar="PREFIX", help="write PREFIX.tck and per-streamline PREFIX.txt")
    threads(c)
    c.set_defaults(func=cmd_compare)

    a = sub.add_parser("aggregate", help="cohort statistics over per-subject reports")
    a.add_argument("reports", nargs="+")
    a.add_argument("--out", required=True, help="cohort .json, or .csv for the table layout")
    a.add_argument("--csv", help="additionally write the cohort table CSV")
    a.add_argument("--pair-name", default="A to B", help="row label in the CSV")
    a.set_defaults(func=cmd_aggregate)

    t = sub.add_parser("track", help="generate a tractogram")
    t.add_argument("--weights", help="trained model weights")
    t.add_argument("--field", help="vector field NIfTI (3*m channels)")
    t.add_argument("--volume", help="model input volume: features (teacher) or context (student)")
    t.add_argument("--mask", required=True, help="tracking mask NIfTI")
    t.add_argument("--seed-mask", help="seeding mask (default: tracking mask)")
    t.add_argument("--count", type=int, default=None, help="target streamline count")
    t.add_argument("--batch-size", type=int, default=None)
    t.add_argument("--warmup-discard", type=int, default=None)
    t.add_argument("--seed", type=int, default=None, help="seeding rng seed")
    t.add_argument("--integrator", choices=("rk2", "euler"), default="rk2", help="field integrator")
    t.add_argument("--config", help="tracking config JSON; flags override it")
    t.add_argument("--out", required=True, help="output .tck (seeds and log written alongside)")
    t.add_argument("--log", help="generation log JSON path")
    threads(t)
    t.set_defaults(func=cmd_track)

    for name, func, help_ in (("train-teacher", cmd_train_teacher, "train a teacher"),
                              ("train-student", cmd_train_student, "distil a student from a teacher")):
        tr = sub.add_parser(name, help=help_,
                            description="DATA_DIR holds train/ and val/ with one directory per subject "
                                        "(features.nii, context.nii, truth.tck).")
        tr.add_argument("data_dir")
        tr.add_argument("--config", help='JSON with optional "model" and "train" sections')
        tr.add_argument("--out", required=True, help="output weights path")
        tr.add_argument("--epochs", type=int, default=None)
        tr.add_argument("--seed", type=int, default=None)
        tr.add_argument("--resume", help="weights to continue from (needs WEIGHTS.adam.npz)")
        tr.add_argument("--loss-csv", help="loss curve CSV (default: OUT.loss.csv)")
        if name == "train-student":
            tr.add_argument("--teacher", required=True, help="teacher weights")
            tr.add_argument("--lambda", dest="lam", type=float, default=None, help="contrastive weight")
        tr.set_defaults(func=func)

    ph = sub.add_parser("phantom", help="write a synthetic phantom")
    ph.add_argument("--spec", help="phantom spec JSON")
    ph.add_argument("--kind", choices=("straight", "circular", "helix", "crossing"))
    ph.add_argument("--seed", type=int, default=None)
    ph.add_argument("--out", required=True, help="output directory")
    ph.set_defaults(func=cmd_phantom)

    g = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    g.add_argument("--config", help='JSON with an optional "model" section (default: tiny)')
    g.add_argument("--role", choices=("teacher", "student", "both"), default="both")
    g.add_argument("--seeds", type=int, nargs="+", default=[0])
    g.add_argument("--h", type=float, default=1e-3)
    g.add_argument("--corrupt-gradient", action="store_true", help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"tractkit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, DegenerateConfigError, FloatingPointError) as exc:
        print(f"tractkit: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, WeightsError, ValueError, OSError, KeyError) as exc:
        print(f"tractkit: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
