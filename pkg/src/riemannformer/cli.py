"""Command line entry point: verify, gradcheck, train, bench, export-heatmap.

Exit codes: 0 success, 1 verification or gradient-check failure, 2 usage or I/O error.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from . import identities
from . import tensor as T
from .attention import AttenuationParams, write_matrix_csv, write_matrix_pgm
from .data import DataError, load_cifar10, load_cifar100, synthetic_position_task, synthetic_splits
from .model import Classifier, SeqConfig, ViTConfig, param_group
from .positional import Layout, MechanismConfig
from .training import CheckpointError, TrainConfig, TrainingDiverged, load_checkpoint, train

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

MECHANISM_CHOICES = ("nopos", "sinusoidal", "rope", "riemann", "riemann-rotation",
                     "riemann-reflection", "riemann-mixed", "riemann-dense")


class UsageError(Exception):
    pass


# --- key=value configuration files --------------------------------------------

MODEL_KEYS = {"image_size": int, "patch_size": int, "d_model": int, "heads": int, "layers": int,
              "mlp_ratio": int, "classes": int, "seq_len": int, "vocab": int}
TRAIN_KEYS = {"epochs": int, "batch": int, "seed": int, "lr": float, "weight_decay": float,
              "schedule": str, "warmup_epochs": int, "subset": int, "augment": None}
MECH_KEYS = {"mechanism": str, "scale_mode": str, "alpha": float, "schedule_mode": str, "beta": float,
             "learn_theta": None, "lf": None, "lf_sigma_mode": str, "lf_a_mode": str,
             "lf_renormalize": None}
RUN_KEYS = {"dataset": str, "data": str, "train_count": int, "test_count": int}
ALL_KEYS = {**MODEL_KEYS, **TRAIN_KEYS, **MECH_KEYS, **RUN_KEYS}


def _parse_bool(text):
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def read_config(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment.  Unknown keys are errors."""
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in ALL_KEYS:
                raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
            conv = ALL_KEYS[key] or _parse_bool
            try:
                out[key] = conv(value)
            except ValueError as exc:
                raise UsageError(f"{path}:{lineno}: bad value for {key}: {exc}") from None
    return out


# --- commands -----------------------------------------------------------------

def cmd_verify(args) -> int:
    start = time.perf_counter()
    results = identities.run_suite(args.seed, args.trials, args.filter)
    if not results:
        print(f"no property matches filter {args.filter!r}", file=sys.stderr)
        return EXIT_USAGE
    failed = []
    for r in results:
        status = "ok  " if r.passed else "FAIL"
        print(f"{status} {r.name:<26} max residual {r.max_residual:.3e}  tol {r.tol:.0e}  "
              f"trials {r.trials}")
        if not r.passed:
            failed.append(r)
    for r in failed:
        print(f"failing property {r.name}: worst case reproducible with sub-seed {list(r.worst_seed)}")
    print(f"{len(results) - len(failed)}/{len(results)} properties passed "
          f"in {time.perf_counter() - start:.2f}s")
    return EXIT_FAIL if failed else EXIT_OK


def micro_config(mechanism: str, lf: bool, classes=4) -> ViTConfig:
    return ViTConfig(image_size=8, patch_size=4, d_model=8, heads=2, layers=1, mlp_ratio=4,
                     classes=classes, mechanism=MechanismConfig.from_name(mechanism),
                     lf=AttenuationParams() if lf else None)


def gradcheck_model(mechanism: str, lf: bool, seed=0, tol=1e-4, eps=1e-5):
    """Finite-difference check of the micro model's cross-entropy on a random batch.

    Geometry parameters are perturbed away from their initial values so that
    their gradients are exercised at a generic point.
    """
    cfg = micro_config(mechanism, lf)
    model = Classifier(cfg, seed=seed)
    rng = np.random.Generator(np.random.Philox(seed + 1))
    for p in model.parameters():
        if param_group(p.name) != "weights":
            p.assign(p.data + rng.uniform(-0.5, 0.5, p.shape))
        else:
            p.assign(p.data + rng.uniform(-0.3, 0.3, p.shape))
    x = rng.uniform(-1, 1, (2, 3, 8, 8))
    y = rng.integers(0, cfg.classes, 2)
    return T.grad_check(lambda: T.cross_entropy(model(x), y), model.parameters(), eps=eps, tol=tol)


def cmd_gradcheck(args) -> int:
    start = time.perf_counter()
    report = gradcheck_model(args.mechanism, args.lf, args.seed, args.tolerance)
    groups = {}
    for name, err in report.per_parameter.items():
        g = param_group(name)
        groups[g] = max(groups.get(g, 0.0), err)
    label = args.mechanism + (" + LF" if args.lf else "")
    print(f"gradcheck {label}: tolerance {args.tolerance:.1e}")
    for g in sorted(groups):
        print(f"  {g:<10} worst relative error {groups[g]:.3e}")
    print(f"{'PASS' if report.passed else 'FAIL'}: max relative error {report.max_rel_error:.3e} "
          f"({time.perf_counter() - start:.1f}s)")
    if not report.passed:
        print(report)
    return EXIT_OK if report.passed else EXIT_FAIL


SYNTHETIC_DEFAULTS = dict(epochs=30, batch=64, lr=3e-3, warmup_epochs=2, d_model=32, heads=2, layers=2,
                          seq_len=16, vocab=4, train_count=2048, test_count=512)


def _merged_options(args) -> dict:
    opts = read_config(args.config) if args.config else {}
    for key in ALL_KEYS:
        val = getattr(args, key, None)
        if val is not None:
            opts[key] = val
    return opts


def build_configs(opts: dict):
    dataset = opts.get("dataset", "cifar10")
    if dataset not in ("cifar10", "cifar100", "synthetic"):
        raise UsageError(f"unknown dataset {dataset!r}")
    if dataset == "synthetic":
        opts = {**SYNTHETIC_DEFAULTS, **opts}
    mech = MechanismConfig.from_name(
        opts.get("mechanism", "riemann"),
        scale_mode=opts.get("scale_mode", "bounded"), alpha=opts.get("alpha", 0.1),
        schedule=opts.get("schedule_mode", "linear"), beta=opts.get("beta", 2.0),
        learn_theta=opts.get("learn_theta", True))
    lf = None
    if opts.get("lf", False):
        lf = AttenuationParams(sigma_mode=opts.get("lf_sigma_mode", "shared"),
                               a_mode=opts.get("lf_a_mode", "identity"),
                               renormalize=opts.get("lf_renormalize", False))
    shared = {k: opts[k] for k in ("d_model", "heads", "layers", "mlp_ratio") if k in opts}
    if dataset == "synthetic":
        seq_len = opts["seq_len"]
        model_cfg = SeqConfig(seq_len=seq_len, vocab=opts["vocab"], classes=seq_len,
                              mechanism=mech, lf=lf, **shared)
    else:
        classes = 10 if dataset == "cifar10" else 100
        if opts.get("classes", classes) != classes:
            raise UsageError(f"{dataset} has {classes} classes")
        model_cfg = ViTConfig(image_size=opts.get("image_size", 32), patch_size=opts.get("patch_size", 4),
                              classes=classes, mechanism=mech, lf=lf, **shared)
    train_kw = {k: opts[k] for k in TRAIN_KEYS if k in opts}
    train_cfg = TrainConfig(**train_kw)
    return dataset, model_cfg, train_cfg, opts


def load_splits(dataset, opts):
    if dataset == "synthetic":
        return synthetic_splits(opts["seq_len"], opts["train_count"], opts["test_count"],
                                seed=opts.get("seed", 0), vocab=opts["vocab"])
    data_dir = opts.get("data") or os.environ.get("RIEMANNFORMER_DATA")
    if not data_dir:
        raise UsageError("no dataset directory: pass --data or set RIEMANNFORMER_DATA")
    return (load_cifar10 if dataset == "cifar10" else load_cifar100)(data_dir)


def cmd_train(args) -> int:
    opts = _merged_options(args)
    dataset, model_cfg, train_cfg, opts = build_configs(opts)
    if args.deterministic_clock:
        train_cfg.wall_clock = False
    splits = load_splits(dataset, opts)
    log = None if args.quiet else (lambda msg: print(msg, flush=True))
    result = train(model_cfg, train_cfg, splits, out_dir=args.out, log=log)
    last = result.metrics[-1] if result.metrics else None
    if last is not None:
        print(f"final test accuracy {last[3]:.4f} (best {result.best_test_acc:.4f}) "
              f"after {result.steps} steps; outputs in {args.out}")
    return EXIT_OK


def bench_mechanisms(seq_len, dim, iters, mechanisms, seed=0, heads=1):
    """Median and 95th-percentile wall time of one attention forward per mechanism."""
    from .attention import AttentionConfig, MultiHeadSelfAttention
    rows = []
    layout = Layout.sequence(seq_len)
    for name in mechanisms:
        rng = np.random.Generator(np.random.Philox(seed))
        mech = MechanismConfig.from_name(name)
        attn = MultiHeadSelfAttention(AttentionConfig(heads, dim, mech), layout, rng)
        x = rng.uniform(-1, 1, (1, seq_len, dim))
        times = []
        ops = None
        for _ in range(iters + 1):
            before = T.node_count()
            t0 = time.perf_counter()
            attn(x)
            times.append(time.perf_counter() - t0)
            ops = T.node_count() - before - 1
        times = np.array(times[1:])
        rows.append((name, float(np.median(times)), float(np.percentile(times, 95)), ops))
    return rows


def cmd_bench(args) -> int:
    mechanisms = args.mechanism or ["nopos", "sinusoidal", "rope", "riemann"]
    rows = bench_mechanisms(args.seq_len, args.dim, args.iters, mechanisms, args.seed)
    print(f"attention forward, L={args.seq_len}, D={args.dim}, {args.iters} iterations")
    print(f"{'mechanism':<20}{'median ms':>12}{'p95 ms':>12}{'ops':>8}")
    for name, med, p95, ops in rows:
        print(f"{name:<20}{med * 1e3:>12.4f}{p95 * 1e3:>12.4f}{ops:>8d}")
    return EXIT_OK


def _heatmap_input(ckpt, cfg, args):
    if isinstance(cfg, SeqConfig):
        seed = (ckpt.train or {}).get("seed", 0) if args.seed is None else args.seed
        task = synthetic_position_task(cfg.seq_len, args.image_index + 1, seed, cfg.vocab)
        return task.inputs[args.image_index][None]
    data_dir = args.data or os.environ.get("RIEMANNFORMER_DATA")
    if not data_dir:
        raise UsageError("image checkpoints need --data (or RIEMANNFORMER_DATA) to pick an image")
    splits = (load_cifar10 if cfg.classes == 10 else load_cifar100)(data_dir)
    if not 0 <= args.image_index < len(splits.test):
        raise UsageError(f"image index {args.image_index} out of range")
    return splits.test.batch_inputs(np.array([args.image_index]))


def cmd_export_heatmap(args) -> int:
    if not os.path.isfile(args.checkpoint):
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    cfg = model.cfg
    if not 0 <= args.layer < cfg.layers:
        raise UsageError(f"layer {args.layer} out of range (model has {cfg.layers})")
    if not 0 <= args.head < cfg.heads:
        raise UsageError(f"head {args.head} out of range (model has {cfg.heads})")
    record = []
    model(_heatmap_input(ckpt, cfg, args), record)
    entry = record[args.layer]
    if args.what == "omega":
        if entry["omega"] is None:
            raise UsageError("checkpoint has no locality-focusing attenuation")
        matrix = entry["omega"][args.head]
    else:
        matrix = entry[args.what][0, args.head]
    writer = write_matrix_csv if args.format == "csv" else write_matrix_pgm
    writer(matrix, args.out)
    print(f"wrote {args.what} ({matrix.shape[0]}x{matrix.shape[1]}) to {args.out}")
    return EXIT_OK


# --- argument parsing ---------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="riemannformer", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="run the randomized geometric identity suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--filter", default=None, help="only properties whose name contains this")
    p.add_argument("--trials", type=int, default=200)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("gradcheck", help="finite-difference check of the micro model")
    p.add_argument("--mechanism", choices=MECHANISM_CHOICES, default="riemann")
    p.add_argument("--lf", action="store_true")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train", help="train a classifier and write metrics/checkpoints")
    p.add_argument("--config")
    p.add_argument("--data", default=None)
    p.add_argument("--dataset", choices=("cifar10", "cifar100", "synthetic"), default=None)
    p.add_argument("--mechanism", choices=MECHANISM_CHOICES, default=None)
    p.add_argument("--lf", action="store_const", const=True, default=None)
    p.add_argument("--epochs", type=int)
    p.add_argument("--subset", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--seq-len", dest="seq_len", type=int)
    p.add_argument("--out", default="runs/latest")
    p.add_argument("--deterministic-clock", action="store_true",
                   help="write 0 in the wall-seconds column so metrics files are byte-stable")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("bench", help="time attention forwards per mechanism")
    p.add_argument("--seq-len", type=int, default=64)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--iters", type=int, default=50)
    p.add_argument("--mechanism", choices=MECHANISM_CHOICES, action="append")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("export-heatmap", help="write S, Omega or S*Omega for one layer/head")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image-index", type=int, default=0)
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--head", type=int, default=0)
    p.add_argument("--what", choices=("scores", "omega", "product"), default="scores")
    p.add_argument("--format", choices=("csv", "pgm"), default="csv")
    p.add_argument("--out", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_export_heatmap)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, DataError, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
