"""Command-line entry point: ``sama <subcommand> [flags]``.

Exit codes: 0 success, 1 validation failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .core import ModelConfig
from .network import CheckpointError

log = logging.getLogger("sama")

EXIT_OK, EXIT_INVALID, EXIT_USAGE = 0, 1, 2


class ValidationError(Exception):
    pass


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _write_json(obj, path) -> None:
    text = json.dumps(obj, indent=2)
    if path is None or str(path) == "-":
        print(text)
    else:
        Path(path).write_text(text + "\n")


# ----------------------------------------------------------------- config flags

_CONFIG_HELP = {
    "depth": "number K of SSI/MSM layer pairs and of attention pairs",
    "d_model": "feature width d",
    "d_state": "SSM state size n",
    "heads": "heads for the scans and attention",
    "msm_variant": "timescale function: pointwise_conv or linear",
    "use_ssi": "graph fusion in the spatial scan",
    "use_msm": "two-frame timescale in the temporal scan",
    "skip_d": "per-channel feed-through term D",
    "chunk": "block length of the chunked scan",
    "input_scale": "multiplier applied to 2D input coordinates",
    "center_input": "subtract the root joint's 2D position from the input",
    "output_scale": "millimetres per unit of head output",
    "lambda_m": "weight of the velocity loss",
    "lambda_n": "weight of the scale-normalised loss",
    "joint_weights": "comma-separated per-joint weights of the position loss",
    "skeleton": "skeleton preset",
    "seed": "seed for parameters and clip sampling",
    "lr": "initial learning rate",
    "weight_decay": "decoupled weight decay",
    "lr_decay": "learning-rate factor applied after every epoch",
    "epochs": "training epochs",
    "batch_size": "clips per optimiser step",
    "clip_len": "frames per clip",
    "stride": "clip stride; also sets clips per epoch",
    "checkpoint_every": "epochs between checkpoints (0 = only the final one)",
}


def add_config_flags(p: argparse.ArgumentParser, skip=()) -> None:
    """One flag per ModelConfig field, except names the subcommand already uses."""
    g = p.add_argument_group("model/training config (override --config)")
    g.add_argument("--config", type=Path, help="JSON file with ModelConfig fields")
    for f in dataclasses.fields(ModelConfig):
        if f.name in skip:
            continue
        flag = "--" + f.name.replace("_", "-")
        help_ = _CONFIG_HELP.get(f.name, f.name)
        if f.type in ("bool", bool):
            g.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None, help=help_)
        elif f.name == "joint_weights":
            g.add_argument(flag, dest=f.name, type=_floats, default=None, help=help_)
        else:
            kind = {"int": int, "float": float, "str": str}[str(f.type)]
            g.add_argument(flag, dest=f.name, type=kind, default=None, help=help_)


def effective_config(args, skip=()) -> ModelConfig:
    """Defaults, then the JSON file, then explicit flags (except ``skip``)."""
    base = {}
    if args.config is not None:
        try:
            base = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(base, dict):
            raise ValidationError("config JSON must be an object")
    for f in dataclasses.fields(ModelConfig):
        v = None if f.name in skip else getattr(args, f.name, None)
        if v is not None:
            base[f.name] = v
    try:
        return ModelConfig.from_dict(base)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"invalid config: {exc}") from None


# ----------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    from .data import SyntheticSpec, save_dataset, synthetic_dataset

    spec = SyntheticSpec(n_sequences=args.n_sequences, T=args.frames, skeleton=args.skeleton,
                         amplitudes=args.amplitudes, frequencies=args.frequencies,
                         noise_std_2d=args.noise_std, seed=args.seed, fps=args.fps,
                         random_yaw=args.random_yaw)
    try:
        data = synthetic_dataset(spec, prefix=args.prefix)
    except ValueError as exc:
        raise ValidationError(str(exc)) from None
    save_dataset(args.out, data)
    meta = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in dataclasses.asdict(spec).items()}
    amp, freq = spec.profile()
    meta.update(amplitudes=amp.tolist(), frequencies=freq.tolist())
    _write_json({"command": "gen-data", "spec": meta, "sequences": len(data)},
                str(args.out) + ".meta.json")
    print(f"wrote {len(data)} sequences to {args.out}")
    return EXIT_OK


def _load(path, skeleton=None):
    from .data import DatasetError, load_dataset

    try:
        return load_dataset(path, skeleton)
    except (OSError, DatasetError) as exc:
        raise ValidationError(f"{path}: {exc}") from None


def cmd_train(args) -> int:
    from .network import SamaModel, count_params
    from .train import LinearBaseline, evaluate, train

    cfg = effective_config(args)
    model = SamaModel(cfg)
    train_set = _load(args.train, model.graph.name)
    eval_set = _load(args.eval, model.graph.name) if args.eval else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(cfg.to_dict(), out / "config.json")
    print(f"parameters: {count_params(cfg, model.graph.n_joints)}")
    try:
        result = train(model, train_set, eval_set, out_dir=out, epochs=args.epochs_override)
    except ValueError as exc:
        raise ValidationError(str(exc)) from None
    summary = {"command": "train", "config": cfg.to_dict(), "epochs": len(result.history),
               "first_train_loss": result.history[0]["train_loss"] if result.history else None,
               "final_train_loss": result.history[-1]["train_loss"] if result.history else None,
               "checkpoints": result.checkpoints}
    if eval_set:
        summary["eval"] = evaluate(model, eval_set)
        summary["linear_baseline_eval"] = LinearBaseline.fit(train_set).evaluate(eval_set, cfg.clip_len)
    _write_json(summary, out / "summary.json")
    print(json.dumps({k: summary[k] for k in ("epochs", "first_train_loss", "final_train_loss")}))
    return EXIT_OK


def _load_model(path):
    from .network import load_checkpoint

    try:
        return load_checkpoint(path)
    except OSError as exc:
        raise ValidationError(f"{path}: {exc}") from None
    except (CheckpointError, KeyError, ValueError) as exc:
        raise ValidationError(f"{path}: {exc}") from None


def cmd_eval(args) -> int:
    from .losses import all_metrics
    from .train import check_dataset, eval_clips

    model, meta = _load_model(args.checkpoint)
    data = _load(args.data)
    try:
        check_dataset(model, data)
        pred, gt = eval_clips(model, data)
    except ValueError as exc:
        raise ValidationError(str(exc)) from None
    metrics = all_metrics(gt if args.oracle else pred, gt)
    _write_json({"command": "eval", "config": model.config.to_dict(), "checkpoint": str(args.checkpoint),
                 "oracle": args.oracle, "clips": int(len(gt)), "metrics": metrics}, args.out)
    return EXIT_OK


def cmd_verify(args) -> int:
    from . import verify

    verify.FAULTS.clear()
    verify.FAULTS.update(args.inject_fault or [])
    try:
        results, table = verify.run_checks(args.only)
    finally:
        verify.FAULTS.clear()
    print(verify.format_report(results, table))
    return EXIT_OK if all(c.passed for c in results) else EXIT_INVALID


BENCH_OWN_FLAGS = ("heads", "chunk", "seed")
BENCH_FIELDS = ("form", "T", "n", "d", "heads", "chunk", "wall_ns_per_token", "max_rel_dev", "macs_per_frame")


def cmd_bench(args) -> int:
    from .network import macs_per_frame
    from .ssm import bench

    cfg = effective_config(args, skip=BENCH_OWN_FLAGS)
    forms = [f.strip() for f in args.forms.split(",") if f.strip()]
    unknown = set(forms) - {"rec", "quad", "chunk"}
    if unknown:
        raise ValidationError(f"unknown forms {sorted(unknown)}")
    macs = macs_per_frame(cfg, 17, args.macs_frames)
    rows = []
    for T in args.t:
        try:
            rows += bench(T, args.n, args.d, forms, args.chunk, repeats=args.repeats, seed=args.seed,
                          heads=args.heads)
        except ValueError as exc:
            raise ValidationError(str(exc)) from None
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=BENCH_FIELDS, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({**r, "heads": args.heads, "macs_per_frame": macs})
    if args.out:
        Path(args.out).write_text(buf.getvalue())
        _write_json({"command": "bench", "config": cfg.to_dict(), "macs_frames": args.macs_frames,
                     "macs_per_frame": macs}, str(args.out) + ".config.json")
    sys.stdout.write(buf.getvalue())
    return EXIT_OK


def cmd_dump_adjacency(args) -> int:
    from .train import adjacency_matrices

    model, _ = _load_model(args.checkpoint)
    mats = adjacency_matrices(model)
    _write_json({"command": "dump-adjacency", "config": model.config.to_dict(),
                 "layers": [m.tolist() for m in mats]}, args.out)
    return EXIT_OK


def cmd_dump_delta(args) -> int:
    from .train import check_dataset, delta_report

    model, _ = _load_model(args.checkpoint)
    data = _load(args.data)
    try:
        check_dataset(model, data, need_3d=False)
        report = delta_report(model, data)
    except ValueError as exc:
        raise ValidationError(str(exc)) from None
    _write_json({"command": "dump-delta", "config": model.config.to_dict(), **report}, args.out)
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .experiments import VARIANTS, Benchmark, run_grid, summarize

    unknown = set(args.variants) - set(VARIANTS)
    if unknown:
        raise ValidationError(f"unknown variants {sorted(unknown)}")
    bench = Benchmark(n_train=args.n_train, n_eval=args.n_eval, frames=args.frames,
                      noise_std_2d=args.noise_std, epochs=args.epochs)
    base = effective_config(args)
    try:
        records = run_grid(args.out, args.variants, args.seeds, bench, base)
    except ValueError as exc:
        raise ValidationError(str(exc)) from None
    summary = {"command": "ablate", "bench": dataclasses.asdict(bench), **summarize(records)}
    _write_json(summary, Path(args.out) / "summary.json")
    print(json.dumps(summary, indent=2))
    return EXIT_OK


# ----------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sama", description="Spatio-temporal SSD pose lifting toolkit.")
    p.add_argument("--threads", type=int, default=None, help="cap on BLAS/OpenMP worker threads")
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic JSON-lines dataset")
    g.add_argument("--out", type=Path, required=True, help="output .jsonl path")
    g.add_argument("--n-sequences", type=int, default=16, help="number of sequences")
    g.add_argument("--frames", type=int, default=64, help="frames per sequence")
    g.add_argument("--skeleton", default="h36m", help="skeleton preset")
    g.add_argument("--amplitudes", type=_floats, default=None, help="per-joint motion amplitude in mm")
    g.add_argument("--frequencies", type=_floats, default=None, help="per-joint frequency in Hz")
    g.add_argument("--noise-std", type=float, default=0.0, help="2D noise std in normalised image units")
    g.add_argument("--fps", type=float, default=50.0, help="frame rate")
    g.add_argument("--seed", type=int, default=0, help="generator seed")
    g.add_argument("--prefix", default="syn", help="sequence id prefix")
    g.add_argument("--random-yaw", action=argparse.BooleanOptionalAction, default=True,
                   help="random body orientation per sequence")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--train", type=Path, required=True, help="training .jsonl")
    t.add_argument("--eval", type=Path, default=None, help="held-out .jsonl")
    t.add_argument("--out", type=Path, required=True, help="output directory")
    t.add_argument("--epochs-override", type=int, default=None, help=argparse.SUPPRESS)
    add_config_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", type=Path, required=True, help="model checkpoint")
    e.add_argument("--data", type=Path, required=True, help="held-out .jsonl with 3D targets")
    e.add_argument("--oracle", action="store_true", help="score the targets themselves (sanity mode)")
    e.add_argument("--out", default=None, help="metrics JSON path (stdout when omitted)")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify", help="run the property and oracle checks")
    v.add_argument("--only", nargs="+", default=None, metavar="CHECK", help="run only these checks")
    v.add_argument("--inject-fault", nargs="+", choices=["quadratic"], default=None,
                   help="test hook: perturb the quadratic scan by 1e-6 to prove detection")
    v.set_defaults(func=cmd_verify)

    b = sub.add_parser("bench", help="time the scan forms",
                       description="Time the scan forms on a random instance.  The config flags "
                                   "only feed the analytic MAC count; --heads, --chunk and --seed "
                                   "describe the benchmark instance.")
    b.add_argument("--t", type=_ints, default=[1024], help="sequence length(s), comma-separated")
    b.add_argument("--n", type=int, default=8, help="state size")
    b.add_argument("--d", type=int, default=16, help="width")
    b.add_argument("--heads", type=int, default=1, help="heads")
    b.add_argument("--forms", default="rec,quad,chunk", help="subset of rec,quad,chunk")
    b.add_argument("--chunk", type=_ints, default=[64], help="chunk size(s) for the chunked form")
    b.add_argument("--repeats", type=int, default=3, help="timing repeats (best is kept)")
    b.add_argument("--seed", type=int, default=0, help="instance seed")
    b.add_argument("--macs-frames", type=int, default=243, help="clip length for the MAC count")
    b.add_argument("--out", type=Path, default=None, help="CSV path (stdout always)")
    add_config_flags(b, skip=BENCH_OWN_FLAGS)
    b.set_defaults(func=cmd_bench)

    a = sub.add_parser("dump-adjacency", help="write each SSI layer's fusion matrix")
    a.add_argument("--checkpoint", type=Path, required=True, help="model checkpoint")
    a.add_argument("--out", default=None, help="JSON path (stdout when omitted)")
    a.set_defaults(func=cmd_dump_adjacency)

    d = sub.add_parser("dump-delta", help="per-joint mean timescale and motion intensity")
    d.add_argument("--checkpoint", type=Path, required=True, help="model checkpoint")
    d.add_argument("--data", type=Path, required=True, help=".jsonl sequences to run")
    d.add_argument("--out", default=None, help="JSON path (stdout when omitted)")
    d.set_defaults(func=cmd_dump_delta)
    x = sub.add_parser("ablate", help="train module variants over several seeds (cached)")
    x.add_argument("--out", type=Path, required=True, help="run cache directory")
    x.add_argument("--variants", type=lambda t: [v for v in t.split(",") if v],
                   default=["vanilla", "ssi", "msm", "full"], help="comma-separated subset")
    x.add_argument("--seeds", type=_ints, default=[0, 1, 2], help="replicate seeds")
    x.add_argument("--epochs", type=int, default=200, help="epochs per run")
    x.add_argument("--n-train", type=int, default=64, help="training sequences")
    x.add_argument("--n-eval", type=int, default=16, help="held-out sequences")
    x.add_argument("--frames", type=int, default=32, help="frames per sequence")
    x.add_argument("--noise-std", type=float, default=0.002, help="2D noise std")
    add_config_flags(x, skip=("seed", "epochs", "use_ssi", "use_msm"))
    x.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None and args.threads < 1:
        print("sama: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        if args.threads is not None:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                return args.func(args)
        return args.func(args)
    except ValidationError as exc:
        print(f"sama {args.command}: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
