"""Command line entry point: generate / train / eval / gradcheck / count / bench.

Configuration is a flat key=value text file plus flag overrides; unknown keys
are rejected and paths are validated before any work starts.  Every run with
an output directory writes the resolved config echo and a git-style run id
there, and all artifacts land under that directory.  Exit codes: 0 success,
2 usage or config error, 3 data format error, 4 numeric failure.

This module keeps numpy imports out of the top level so the thread knobs
(--threads / threads=) can pin the BLAS pools before numpy loads.
"""

import argparse
import hashlib
import os
import sys
import time

from .errors import ConfigError, FormatError, NumericError, ShapeError, UsageError

_SENTINEL = object()

# key -> (parser, default); None default means "required where used"
_SCHEMA = {
    "dataset": (str, None),
    "spec": (str, "tinycan"),
    "seed": (int, 7),
    "epochs": (int, 30),
    "batch_size": (int, 16),
    "lr": (float, 0.01),
    "momentum": (float, 0.9),
    "weight_decay": (float, 1e-4),
    "lr_decay_epochs": ("csv_int", (20, 25)),
    "lr_decay_factor": (float, 0.1),
    "val_fraction": (float, 0.2),
    "threads": (int, 1),
    "dtype": (str, "float32"),
    "clips_per_class": (int, 100),
    "frames": (int, 8),
    "height": (int, 32),
    "width": (int, 32),
    "noise": (float, 0.05),
    "checkpoint": (str, None),
    "split": (str, "val"),
    "bench_iters": (int, 5),
    "modules": (str, "all"),
    "gradcheck_seeds": (int, 1),
    "stop_at_val": (float, None),
}


def _convert(key: str, raw: str):
    kind = _SCHEMA[key][0]
    try:
        if kind == "csv_int":
            return tuple(int(v) for v in raw.split(",") if v != "")
        return kind(raw)
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for config key {key!r}")


def load_config(path) -> dict:
    """Parse a flat key=value file; unknown keys are rejected."""
    values = {}
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}")
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, raw = line.partition("=")
        key = key.strip()
        if key not in _SCHEMA:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = _convert(key, raw.strip())
    return values


def resolve_config(args) -> dict:
    config = {key: default for key, (_, default) in _SCHEMA.items()}
    if getattr(args, "config", None):
        config.update(load_config(args.config))
    for key in _SCHEMA:
        flag = getattr(args, key, _SENTINEL)
        if flag is not _SENTINEL and flag is not None:
            config[key] = flag
    if config["dtype"] not in ("float32", "float64"):
        raise ConfigError(f"dtype must be float32 or float64, got {config['dtype']!r}")
    if config["split"] not in ("train", "val", "all"):
        raise ConfigError(f"split must be train, val, or all, got {config['split']!r}")
    return config


def config_echo(config: dict, keys: list[str]) -> str:
    lines = []
    for key in sorted(keys):
        value = config[key]
        if value is None:
            continue
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


def start_run(out_dir, config: dict, keys: list[str]) -> str:
    """Write the config echo and derived run id; returns the run id."""
    echo = config_echo(config, keys)
    run_id = hashlib.sha1(echo.encode()).hexdigest()
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.txt"), "w") as fh:
        fh.write(echo)
    with open(os.path.join(out_dir, "run_id.txt"), "w") as fh:
        fh.write(run_id + "\n")
    return run_id


def _require_dataset(config) -> str:
    path = config["dataset"]
    if not path:
        raise ConfigError("a dataset path is required (dataset= or --dataset)")
    if not os.path.isfile(path):
        raise ConfigError(f"dataset file not found: {path}")
    return path


_GENERATE_KEYS = ["seed", "clips_per_class", "frames", "height", "width",
                  "noise", "threads"]
_TRAIN_KEYS = ["dataset", "spec", "seed", "epochs", "batch_size", "lr",
               "momentum", "weight_decay", "lr_decay_epochs", "lr_decay_factor",
               "val_fraction", "dtype", "threads", "stop_at_val"]
_EVAL_KEYS = ["dataset", "spec", "checkpoint", "split", "val_fraction",
              "batch_size", "dtype", "threads"]


def cmd_generate(args) -> int:
    config = resolve_config(args)
    if args.out is None:
        raise UsageError("generate requires --out")
    start_run(args.out, config, _GENERATE_KEYS)
    from . import dataset
    path = os.path.join(args.out, "dataset.canv")
    header = dataset.generate(path, config["seed"], config["clips_per_class"],
                              config["frames"], config["height"],
                              config["width"], config["noise"])
    print(f"wrote {header.clip_count} clips ({header.classes} classes, "
          f"T={header.frames}, {header.height}x{header.width}) to {path}")
    return 0


def cmd_train(args) -> int:
    config = resolve_config(args)
    if args.out is None:
        raise UsageError("train requires --out")
    dataset_path = _require_dataset(config)
    start_run(args.out, config, _TRAIN_KEYS)
    from . import report, training
    from .dataset import read_header
    from .network import get_spec

    spec = get_spec(config["spec"], frames=read_header(dataset_path).frames)
    hyper = training.Hyper(
        seed=config["seed"], epochs=config["epochs"],
        batch_size=config["batch_size"], lr=config["lr"],
        momentum=config["momentum"], weight_decay=config["weight_decay"],
        lr_decay_epochs=config["lr_decay_epochs"],
        lr_decay_factor=config["lr_decay_factor"],
        val_fraction=config["val_fraction"], dtype=config["dtype"],
        stop_at_val=config["stop_at_val"])
    ckpt = os.path.join(args.out, "best.ckpt")
    result, _ = training.train(spec, dataset_path, hyper, checkpoint_path=ckpt)
    training.write_metrics(os.path.join(args.out, "metrics.tsv"), result.rows)
    report.save_training_curves(result.rows, os.path.join(args.out, "curves.png"))
    for row in result.rows:
        print(f"epoch {row.epoch:3d}  loss {row.train_loss:.4f}  "
              f"train {row.train_top1:.3f}  val {row.val_top1:.3f}")
    print(f"best val top-1 {result.best_val_top1:.4f} "
          f"(epoch {result.best_epoch}); checkpoint at {ckpt}")
    return 0


def cmd_eval(args) -> int:
    config = resolve_config(args)
    if args.out is None:
        raise UsageError("eval requires --out")
    dataset_path = _require_dataset(config)
    ckpt = config["checkpoint"]
    if not ckpt:
        raise ConfigError("eval needs checkpoint= or --checkpoint")
    if not os.path.isfile(ckpt):
        raise ConfigError(f"checkpoint file not found: {ckpt}")
    start_run(args.out, config, _EVAL_KEYS)
    from . import report, training
    from .dataset import load_all, read_header, train_val_split
    from .network import get_spec

    header = read_header(dataset_path)
    spec = get_spec(config["spec"], frames=header.frames)
    if header.classes != spec.classes:
        raise ConfigError(f"dataset has {header.classes} classes but spec "
                          f"{spec.name!r} expects {spec.classes}")
    params = training.restore_params(spec, ckpt, dtype=config["dtype"])
    _, labels, clips = load_all(dataset_path)
    clips = clips.astype(config["dtype"])
    train_idx, val_idx = train_val_split(header.clip_count, config["val_fraction"])
    pick = {"train": train_idx, "val": val_idx}.get(config["split"])
    if pick is not None:
        clips, labels = clips[pick], labels[pick]
    top1, top5, confusion = training.evaluate(spec, params, clips, labels,
                                              config["batch_size"])
    with open(os.path.join(args.out, "eval.tsv"), "w") as fh:
        fh.write(f"split\t{config['split']}\n")
        fh.write(f"clips\t{len(labels)}\n")
        fh.write(f"top1\t{top1:.6f}\n")
        fh.write(f"top5\t{top5:.6f}\n")
    report.save_confusion_matrix(confusion,
                                 os.path.join(args.out, "confusion.png"))
    print(f"top-1 {top1:.4f}  top-5 {top5:.4f}  "
          f"({len(labels)} clips, split={config['split']})")
    return 0


def cmd_gradcheck(args) -> int:
    config = resolve_config(args)
    from . import gradcheck, report
    if config["modules"] == "all":
        modules = None
    else:
        modules = [m for m in config["modules"].split(",") if m]
        if not modules:
            raise UsageError("gradcheck needs a non-empty module list")
    if args.corrupt_adjoint:
        gradcheck.corrupt_adjoint(args.corrupt_adjoint)
    seeds = tuple(range(config["gradcheck_seeds"]))
    results = gradcheck.run_checks(modules, seeds)
    if args.out is not None:
        start_run(args.out, config, ["modules", "gradcheck_seeds", "threads"])
        with open(os.path.join(args.out, "gradcheck.tsv"), "w") as fh:
            fh.write("module\tmax_rel_error\n")
            for name, err in results.items():
                fh.write(f"{name}\t{err:.3e}\n")
        report.save_gradcheck_figure(results, gradcheck.TOLERANCE,
                                     os.path.join(args.out, "gradcheck.png"))
    failed = []
    for name, err in results.items():
        status = "ok" if err <= gradcheck.TOLERANCE else "FAIL"
        print(f"{name:15s} max relative error {err:.3e}  {status}")
        if err > gradcheck.TOLERANCE:
            failed.append(name)
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        raise NumericError(f"gradient check failed for: {', '.join(failed)}")
    return 0


def cmd_count(args) -> int:
    config = resolve_config(args)
    from . import report
    from .network import count_cost, get_spec
    spec = get_spec(config["spec"], frames=config["frames"])
    cost = count_cost(spec)
    rows = [f"{e.name}\t{e.params}\t{e.macs}" for e in cost.entries]
    table = "layer\tparams\tmacs\n" + "\n".join(rows) + "\n"
    print(table, end="")
    print(f"total\t{cost.total_params}\t{cost.total_macs}")
    print(f"{spec.name} @ T={spec.frames}: {cost.total_params / 1e6:.1f}M params, "
          f"{cost.total_macs / 1e9:.1f}G MACs")
    if args.out is not None:
        start_run(args.out, config, ["spec", "frames", "threads"])
        with open(os.path.join(args.out, "cost.tsv"), "w") as fh:
            fh.write(table)
            fh.write(f"total\t{cost.total_params}\t{cost.total_macs}\n")
        report.save_cost_figure(cost, os.path.join(args.out, "cost.png"))
    return 0


def _median_ms(fn, iters: int) -> float:
    times = []
    for _ in range(iters):
        start = time.perf_counter()
        fn()
        times.append((time.perf_counter() - start) * 1e3)
    times.sort()
    mid = len(times) // 2
    return times[mid] if len(times) % 2 else 0.5 * (times[mid - 1] + times[mid])


def cmd_bench(args) -> int:
    config = resolve_config(args)
    iters = config["bench_iters"]
    if iters < 1:
        raise UsageError("bench needs at least one iteration")
    import numpy as np
    from . import kernels, report
    from .network import get_spec, init_net, net_forward

    rng = np.random.default_rng(config["seed"])
    rows = []

    def bench(name, dims, fn):
        rows.append((name, dims, _median_ms(fn, iters)))

    # Small shape pairs the optimized kernel with its literal-loop oracle.
    x_small = rng.standard_normal((1, 4, 16, 16, 8)).astype(np.float32)
    k_small = kernels.ConvKernel(
        0.1 * rng.standard_normal((8, 1, 3, 1, 1)).astype(np.float32),
        None, groups=8, padding=(1, 0, 0))
    bench("conv3d", "1x4x16x16x8 dw3x1x1", lambda: kernels.conv3d(x_small, k_small))
    bench("conv3d_oracle", "1x4x16x16x8 dw3x1x1",
          lambda: kernels.conv3d_oracle(x_small, k_small))

    x_big = rng.standard_normal((1, 8, 56, 56, 64)).astype(np.float32)
    k_dw = kernels.ConvKernel(
        0.1 * rng.standard_normal((64, 1, 3, 1, 1)).astype(np.float32),
        None, groups=64, padding=(1, 0, 0))
    bench("conv3d", "1x8x56x56x64 dw3x1x1", lambda: kernels.conv3d(x_big, k_dw))

    k_point = kernels.ConvKernel(
        0.1 * rng.standard_normal((64, 64, 1, 1, 1)).astype(np.float32),
        np.zeros(64, dtype=np.float32))
    bench("conv3d", "1x8x56x56x64 1x1x1", lambda: kernels.conv3d(x_big, k_point))

    x_mid = rng.standard_normal((1, 8, 28, 28, 32)).astype(np.float32)
    k_spatial = kernels.ConvKernel(
        0.1 * rng.standard_normal((32, 32, 1, 3, 3)).astype(np.float32),
        None, padding=(0, 1, 1))
    bench("conv3d", "1x8x28x28x32 1x3x3", lambda: kernels.conv3d(x_mid, k_spatial))

    bench("temporal_diff", "1x8x56x56x64", lambda: kernels.temporal_diff(x_big))
    bench("channel_pool", "1x8x56x56x64", lambda: kernels.channel_pool(x_big))

    spec = get_spec("tinycan")
    params = init_net(spec, np.random.default_rng(0), np.float32)
    clip = rng.standard_normal((1, 8, 32, 32, 1)).astype(np.float32)
    bench("tinycan_forward", "1x8x32x32x1",
          lambda: net_forward(spec, params, clip))

    print("kernel\tdims\tmedian_ms")
    for name, dims, ms in rows:
        print(f"{name}\t{dims}\t{ms:.3f}")
    if args.out is not None:
        start_run(args.out, config, ["seed", "bench_iters", "threads"])
        with open(os.path.join(args.out, "bench.tsv"), "w") as fh:
            fh.write("kernel\tdims\tmedian_ms\n")
            for name, dims, ms in rows:
                fh.write(f"{name}\t{dims}\t{ms:.3f}\n")
        report.save_bench_figure(rows, os.path.join(args.out, "bench.png"))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="canet",
        description="Multi-scale temporal / group spatial attention toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory (all artifacts land here)")
        p.add_argument("--threads", type=int)

    p = sub.add_parser("generate", help="write a synthetic motion dataset")
    common(p)
    p.add_argument("--clips-per-class", dest="clips_per_class", type=int)
    p.add_argument("--frames", type=int)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a spec on a dataset")
    common(p)
    p.add_argument("--dataset")
    p.add_argument("--spec")
    p.add_argument("--epochs", type=int)
    p.add_argument("--dtype")
    p.add_argument("--stop-at-val", dest="stop_at_val", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--dataset")
    p.add_argument("--checkpoint")
    p.add_argument("--spec")
    p.add_argument("--split", choices=("train", "val", "all"))
    p.add_argument("--dtype")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="certify gradients by finite differences")
    common(p)
    p.add_argument("--modules", help="comma-separated module list (default: all)")
    p.add_argument("--seeds", dest="gradcheck_seeds", type=int)
    p.add_argument("--corrupt-adjoint", dest="corrupt_adjoint",
                   help="test hook: deliberately corrupt one op's backward")
    p.set_defaults(func=cmd_gradcheck, corrupt_adjoint=None)

    p = sub.add_parser("count", help="analytic parameter/MAC report for a spec")
    common(p)
    p.add_argument("--spec")
    p.add_argument("--frames", type=int)
    p.set_defaults(func=cmd_count)

    p = sub.add_parser("bench", help="median-of-k kernel timings")
    common(p)
    p.add_argument("--iters", dest="bench_iters", type=int)
    p.set_defaults(func=cmd_bench)

    return parser


def _pin_threads(args) -> None:
    threads = args.threads
    if threads is None and getattr(args, "config", None):
        try:
            threads = load_config(args.config).get("threads")
        except ConfigError:
            threads = None  # surfaced later by resolve_config
    threads = threads if threads is not None else _SCHEMA["threads"][1]
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(threads)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _pin_threads(args)
    try:
        return args.func(args)
    except (UsageError, ConfigError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
