"""Command-line entry point: ``kdpose <command> --config FILE [--seed N] [--out PATH]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from .evaluation import ablate, evaluate
from .gradcheck import format_results, run_suite
from .network import FLOP_CONVENTION, CheckpointError, build, count_flops, count_params, load_checkpoint
from .synth import EASY_OPTIONS, DatasetFormatError, SceneOptions, generate_dataset, read_dataset, split, write_dataset
from .training import TrainConfig, TrainingAborted, train_student, train_teacher

logger = logging.getLogger("kdpose")

DATA_DEFAULTS = {"n_train": 500, "n_test": 200, "n_classes": 1, "cut_paste_fraction": 0.5, "scene": {}}


class ConfigError(ValueError):
    pass


def load_config(path) -> tuple[TrainConfig, dict]:
    """Read a JSON run config: TrainConfig fields at top level, dataset options under ``"data"``."""
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    data = dict(DATA_DEFAULTS)
    extra = raw.pop("data", {}) or {}
    unknown = set(extra) - set(DATA_DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown data option(s): {sorted(unknown)}")
    data.update(extra)
    for key in ("n_train", "n_test", "n_classes"):
        if not isinstance(data[key], int) or data[key] < (1 if key == "n_classes" else 0):
            raise ConfigError(f"data.{key} must be a nonnegative integer")
    try:
        return TrainConfig.from_dict(raw), data
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _with_seed(config: TrainConfig, seed):
    if seed is None:
        return config
    d = config.to_dict()
    d["seed"] = seed
    return TrainConfig.from_dict(d)


def _load_data(path):
    samples, manifest = read_dataset(path)
    return split(samples, manifest, "train"), split(samples, manifest, "test"), manifest


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _metrics_config(cfg: TrainConfig) -> dict:
    return {"sigma": cfg.sigma, "vector_radius": cfg.vector_radius, "peak_threshold": cfg.peak_threshold,
            "angle_threshold": cfg.angle_threshold}


def cmd_gen_data(args, cfg, data) -> int:
    n_train, n_test = data["n_train"], data["n_test"]
    if args.n is not None:
        if args.n < 1:
            raise ConfigError("--n must be positive")
        n_test = round(args.n * n_test / max(n_train + n_test, 1))
        n_train = args.n - n_test
    options = SceneOptions.from_dict({**EASY_OPTIONS.to_dict(), **data["scene"]})
    samples, manifest = generate_dataset(n_train, n_test, cfg.seed, data["n_classes"], options,
                                         data["cut_paste_fraction"])
    write_dataset(samples, manifest, args.out)
    print(f"wrote {len(samples)} samples ({n_train} train / {n_test} test) to {args.out}")
    return 0


def cmd_train(args, cfg, data) -> int:
    train, test, manifest = _load_data(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = train_teacher(train, cfg, manifest.options.get("n_classes", data["n_classes"]), test, out,
                        out / "train_log.jsonl")
    print(f"teacher trained for {len(res.log)} epochs, final loss {res.log[-1]['loss']:.6g}; checkpoint {out}")
    return 0


def cmd_distill(args, cfg, data) -> int:
    train, test, manifest = _load_data(args.data)
    teacher = load_checkpoint(args.teacher) if args.teacher else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = train_student(train, cfg, teacher, manifest.options.get("n_classes", data["n_classes"]), test, out,
                        out / "train_log.jsonl")
    kind = "distilled" if teacher is not None else "baseline"
    print(f"{kind} student trained for {len(res.log)} epochs, final loss {res.log[-1]['loss']:.6g}; "
          f"checkpoint {out}")
    return 0


def cmd_eval(args, cfg, data) -> int:
    _, test, manifest = _load_data(args.data)
    net = None if args.oracle else load_checkpoint(args.checkpoint)
    if net is not None and net.spec.C != manifest.options.get("n_classes", net.spec.C):
        raise CheckpointError("checkpoint class count does not match the dataset")
    report = evaluate(net, test, manifest.models, _metrics_config(cfg), oracle=args.oracle)
    report.config["seed"] = cfg.seed
    report.write(args.out)
    print(report.to_csv(), end="")
    return 0


def cmd_ablate(args, cfg, data) -> int:
    train, test, manifest = _load_data(args.data)
    teacher = load_checkpoint(args.teacher)
    seeds = [cfg.seed + k for k in range(args.seeds)]
    report = ablate(train, test, manifest.models, cfg, teacher, seeds, teacher.spec.C,
                    include_sweep=not args.no_sweep, out_dir=args.out)
    for table, cells in report["tables"].items():
        print(table)
        for c in cells:
            print(f"  {c['cell']:20s} median {c['median']:6.2f}  [{c['min']:.2f}, {c['max']:.2f}]")
    return 0


def cmd_gradcheck(args, cfg, data) -> int:
    results = run_suite(seed=cfg.seed)
    text = format_results(results)
    print(text)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "gradcheck.txt").write_text(text + "\n")
    return 0 if all(r.passed for r in results) else 1


def cmd_stats(args, cfg, data) -> int:
    res = tuple(data["scene"].get("resolution", (128, 128)))
    stats = {"flop_convention": FLOP_CONVENTION, "input_resolution": list(res)}
    for role in ("teacher", "student"):
        net = build(cfg.spec_for(role, data["n_classes"]), cfg.seed)
        stats[role] = {"spec": net.spec.to_dict(), "params": count_params(net), "flops": count_flops(net, res)}
        print(f"{role:8s} params {stats[role]['params']:>10d}  flops {stats[role]['flops']:>14d}")
    if args.out:
        _write_json(Path(args.out) / "stats.json", stats)
    return 0


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate a synthetic cuboid dataset"),
    "train": (cmd_train, "train the teacher network"),
    "distill": (cmd_distill, "train the student, distilling from --teacher when given"),
    "eval": (cmd_eval, "evaluate a checkpoint (or ground-truth maps with --oracle)"),
    "ablate": (cmd_ablate, "loss-component grid and lambda sweeps over several seeds"),
    "gradcheck": (cmd_gradcheck, "finite-difference gradient suite"),
    "stats": (cmd_stats, "parameter and FLOP counts of both networks"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kdpose", description="Keypoint pose estimation with distillation.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name, (_, help_) in COMMANDS.items():
        p = sub.add_parser(name, help=help_, description=help_)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        needs_out = name not in ("gradcheck", "stats")
        p.add_argument("--out", required=needs_out, default=None, help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "gen-data":
            p.add_argument("--n", type=int, default=None, help="total number of samples")
        if name in ("train", "distill", "eval", "ablate"):
            p.add_argument("--data", required=True, help="dataset directory written by gen-data")
        if name == "distill":
            p.add_argument("--teacher", default=None, help="teacher checkpoint directory")
        if name == "ablate":
            p.add_argument("--teacher", required=True, help="teacher checkpoint directory")
            p.add_argument("--seeds", type=int, default=5)
            p.add_argument("--no-sweep", action="store_true", help="run only the four-way grid")
        if name == "eval":
            group = p.add_mutually_exclusive_group(required=True)
            group.add_argument("--checkpoint")
            group.add_argument("--oracle", action="store_true", help="score ground-truth encoded maps")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler = COMMANDS[args.command][0]
    try:
        cfg, data = load_config(args.config)
        cfg = _with_seed(cfg, args.seed)
        with threadpool_limits(1):
            return handler(args, cfg, data)
    except TrainingAborted as exc:
        print(f"error: {exc} (last good checkpoint: {exc.checkpoint})", file=sys.stderr)
        return 1
    except (ConfigError, DatasetFormatError, CheckpointError, ValueError, TypeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
