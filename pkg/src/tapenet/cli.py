"""Command-line entry point: generate -> simulate -> train -> predict -> evaluate -> bench.

Every subcommand writes a run manifest (``<output>.run.json`` next to a file output,
``run.json`` inside an output directory). Exit codes: 0 success, 1 runtime or
validation failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

from . import __version__
from .datagen import GenConfig, GenerationError, generate_dataset, scale_packets, split_dataset
from .des import GroundTruth, aggregate, simulate, write_packets_csv
from .model import ModelConfig, NetworkModel, Sample, WindowMismatchError, prediction_to_dict
from .scenario import ScenarioError, dump_json, load_scenario, save_scenario
from .train import (PRESETS, TrainConfig, TrainingDiverged, bench_inference, evaluate,
                    format_bench, train)

log = logging.getLogger("tapenet")

SPLITS = ("train", "val", "test")


class UsageError(Exception):
    """Bad command-line usage detected after argument parsing (exit code 2)."""


@dataclass
class RunManifest:
    subcommand: str
    config: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    wall_time_s: float = 0.0
    tool_version: str = __version__

    def write(self, path) -> None:
        dump_json(asdict(self), path)


def manifest_path(out: Path) -> Path:
    return out / "run.json" if out.is_dir() else out.with_name(out.name + ".run.json")


# ---------------------------------------------------------------------------
# dataset directory helpers


def _scenario_paths(dataset: Path) -> dict[str, Path]:
    """Scenario name -> file, from dataset.json when present, else every *.json file."""
    if dataset.is_file():
        return {dataset.stem: dataset}
    index = dataset / "dataset.json"
    if index.exists():
        meta = json.loads(index.read_text())
        return {name: dataset / rel for name, rel in meta["scenarios"].items()}
    found = sorted(p for p in (dataset / "scenarios").glob("*.json"))
    if not found:
        found = sorted(p for p in dataset.glob("*.json") if p.name != "run.json")
    if not found:
        raise FileNotFoundError(f"{dataset}: no scenario files found")
    return {p.stem: p for p in found}


def _split_names(dataset: Path, split: str, names: list[str]) -> list[str]:
    if split == "all":
        return names
    index = dataset / "dataset.json"
    if not index.exists():
        raise UsageError(f"{dataset} has no dataset.json, so split '{split}' is undefined; use --split all")
    chosen = json.loads(index.read_text())["split"][split]
    if not chosen:
        log.warning("split '%s' is empty; using all %d scenarios", split, len(names))
        return names
    return chosen


def _load_scenario(path: Path):
    try:
        return load_scenario(path)
    except ScenarioError as e:
        msg = str(e)
        raise ScenarioError(msg if str(path) in msg else f"{path}: {msg}") from None


def _load_sample(args: tuple[Path, Optional[Path]]) -> Sample:
    scen_path, truth_path = args
    s = _load_scenario(scen_path)
    truth = None
    if truth_path is not None:
        if not truth_path.exists():
            raise FileNotFoundError(f"missing ground truth {truth_path}; run 'simulate' first")
        truth = GroundTruth.from_dict(json.loads(truth_path.read_text()))
    return Sample.from_scenario(s, truth)


def _load_samples(dataset: Path, truth_dir: Optional[Path], names: list[str], jobs: int = 1):
    paths = _scenario_paths(dataset)
    missing = [n for n in names if n not in paths]
    if missing:
        raise FileNotFoundError(f"{dataset}: unknown scenarios {missing}")
    jobs_args = [(paths[n], None if truth_dir is None else truth_dir / f"{n}.json") for n in names]
    return _pmap(_load_sample, jobs_args, jobs)


def _pmap(fn, items, jobs: int):
    if jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _read_json_config(path: Optional[str], what: str) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} config file not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ValueError(f"{p}: invalid JSON at line {e.lineno} column {e.colno}: {e.msg}") from None


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(args, m: RunManifest) -> None:
    raw = _read_json_config(args.config, "generation")
    m.seeds["config_seed"] = raw.get("seed")
    raw["seed"] = args.seed
    if args.n_scenarios is not None:
        raw["n_scenarios"] = args.n_scenarios
    cfg = GenConfig.from_dict(raw)
    m.config = cfg.to_dict()
    ratios = tuple(args.split_ratios)
    scenarios = generate_dataset(cfg, jobs=args.jobs)

    out = Path(args.out)
    (out / "scenarios").mkdir(parents=True, exist_ok=True)
    width = max(4, len(str(cfg.n_scenarios - 1)))
    names = {}
    for i, s in enumerate(scenarios):
        name = f"scenario_{i:0{width}d}"
        rel = f"scenarios/{name}.json"
        save_scenario(s, out / rel)
        names[name] = rel
    parts = split_dataset(list(names), ratios, seed=args.seed)
    dump_json({"gen_config": cfg.to_dict(), "split_ratios": list(ratios),
               "scenarios": names, "split": dict(zip(SPLITS, parts))}, out / "dataset.json")
    m.config["split_ratios"] = list(ratios)
    m.outputs = {"dataset": str(out), "n_scenarios": len(names)}
    log.info("wrote %d scenarios to %s (split %s)", len(names), out,
             "/".join(str(len(p)) for p in parts))


def _simulate_one(job: tuple[str, Path, Path, bool]) -> str:
    name, path, out, packets = job
    s = _load_scenario(path)
    records = simulate(s)
    truth = aggregate(records, s.window_size, s.n_windows, [f.id for f in s.flows])
    dump_json(truth.to_dict(), out / f"{name}.json")
    if packets:
        write_packets_csv(records, out / f"{name}.packets.csv")
    return name


def cmd_simulate(args, m: RunManifest) -> None:
    dataset = Path(args.dataset)
    paths = _scenario_paths(dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(n, p, out, args.packets_csv) for n, p in paths.items()]
    done = _pmap(_simulate_one, jobs, args.jobs)
    m.inputs = {"dataset": str(dataset)}
    m.config = {"packets_csv": bool(args.packets_csv)}
    m.outputs = {"truth_dir": str(out), "files": [f"{n}.json" for n in done]}
    log.info("simulated %d scenarios into %s", len(done), out)


def _train_configs(args) -> tuple[TrainConfig, ModelConfig]:
    raw = _read_json_config(args.config, "training")
    model_cfg, train_cfg = PRESETS[args.preset]
    model_raw = raw.pop("model", {})
    if model_raw:
        unknown = sorted(set(model_raw) - set(asdict(model_cfg)))
        if unknown:
            raise ValueError(f"unknown model config fields: {unknown}")
        model_cfg = replace(model_cfg, **model_raw)
    overrides = {**raw, "seed": args.seed}
    if args.epochs is not None:
        overrides["max_epochs"] = args.epochs
    if args.steps is not None:
        overrides["steps_per_epoch"] = args.steps
    if args.lr is not None:
        overrides["lr"] = args.lr
    train_cfg = TrainConfig.from_dict({**asdict(train_cfg), **overrides})
    return train_cfg, model_cfg


def cmd_train(args, m: RunManifest) -> None:
    train_cfg, model_cfg = _train_configs(args)
    dataset = Path(args.dataset)
    names = list(_scenario_paths(dataset))
    tr_names = _split_names(dataset, "train", names)
    va_names = _split_names(dataset, "val", names)
    truth = Path(args.truth)
    tr = _load_samples(dataset, truth, tr_names, args.jobs)
    va = _load_samples(dataset, truth, va_names, args.jobs)
    res = train(train_cfg, tr, va, model_cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    res.save(out, train_cfg)
    m.config = {"train": asdict(train_cfg), "model": asdict(model_cfg), "preset": args.preset}
    m.seeds["train_seed"] = train_cfg.seed
    m.inputs = {"dataset": str(dataset), "truth": str(truth), "train": tr_names, "val": va_names}
    m.outputs = {"checkpoint": str(out), "best_epoch": res.best_epoch,
                 "best_val_mape": res.best_val_mape, "updates": res.updates}
    print(f"best validation MAPE {res.best_val_mape:.3f}% at epoch {res.best_epoch}")


def cmd_predict(args, m: RunManifest) -> None:
    model = NetworkModel.load(args.model)
    s = _load_scenario(Path(args.scenario))
    sample = Sample.from_scenario(s)
    pred = model.predict(sample)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    dump_json({"window_s": s.window_size, "n_windows": s.n_windows, "unit": "s",
               "flows": prediction_to_dict(sample, pred)}, out)
    m.inputs = {"model": args.model, "scenario": args.scenario}
    m.outputs = {"predictions": str(out)}


def cmd_evaluate(args, m: RunManifest) -> None:
    model = NetworkModel.load(args.model)
    dataset = Path(args.dataset)
    names = _split_names(dataset, args.split, list(_scenario_paths(dataset)))
    samples = _load_samples(dataset, Path(args.truth), names, args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = evaluate(model, samples, residuals_path=out / "residuals.csv", names=names)
    dump_json(report.to_dict(), out / "report.json")
    table = report.table()
    (out / "report.txt").write_text(table + "\n")
    print(table)
    m.inputs = {"model": args.model, "dataset": str(dataset), "truth": args.truth,
                "split": args.split, "scenarios": names}
    m.outputs = {"report": str(out / "report.json"), "table": str(out / "report.txt"),
                 "residuals": str(out / "residuals.csv")}


def _parse_sweep(text: str) -> tuple[str, list[str]]:
    kind, _, values = text.partition("=")
    vals = [v.strip() for v in values.split(",") if v.strip()]
    if kind not in ("packets", "nodes", "window") or not vals:
        raise UsageError(f"bad --sweep {text!r}; expected packets=1x,10x,... | nodes=5,8,... | window=0.2,0.1,...")
    return kind, vals


def _bench_points(args, model: NetworkModel) -> list[tuple[str, Sample]]:
    kind, vals = _parse_sweep(args.sweep)
    if kind == "nodes":
        raw = _read_json_config(args.config, "generation")
        raw.update(seed=args.seed if args.seed is not None else 0, n_scenarios=1, window_s=model.window_size)
        points = []
        for v in vals:
            n = int(v)
            lo, hi = raw.get("path_router_range", (3, 5))
            cfg = GenConfig.from_dict({**raw, "node_range": (n, n),
                                       "path_router_range": (min(lo, n), min(hi, n))})
            points.append((f"{n} nodes", Sample.from_scenario(generate_dataset(cfg)[0])))
        return points
    if args.scenario is None:
        raise UsageError(f"--sweep {kind}=... needs --scenario")
    base = _load_scenario(Path(args.scenario))
    points = []
    for v in vals:
        if kind == "packets":
            factor = v[:-1] if v.endswith("x") else v
            if not factor.isdigit():
                raise UsageError(f"bad packet factor {v!r}")
            points.append((f"{int(factor)}x", Sample.from_scenario(scale_packets(base, int(factor)))))
        else:
            points.append((f"{float(v):g} s", Sample.from_scenario(base.with_window(float(v)))))
    return points


def cmd_bench(args, m: RunManifest) -> None:
    model = NetworkModel.load(args.model)
    points = _bench_points(args, model)
    rows = bench_inference(model, points, repeats=args.repeats)
    print(format_bench(rows))
    m.config = {"sweep": args.sweep, "repeats": args.repeats}
    m.inputs = {"model": args.model, "scenario": args.scenario}
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    dump_json({"rows": rows}, out)
    m.outputs = {"bench": str(out)}


COMMANDS = {"generate": cmd_generate, "simulate": cmd_simulate, "train": cmd_train,
            "predict": cmd_predict, "evaluate": cmd_evaluate, "bench": cmd_bench}


# ---------------------------------------------------------------------------
# argument parsing


def _add_globals(p: argparse.ArgumentParser, default) -> None:
    p.add_argument("--seed", type=int, default=default(None), help="single source of randomness")
    p.add_argument("--jobs", type=int, default=default(1), help="scenario-level worker processes")
    p.add_argument("--quiet", action="store_true", default=default(False), help="only log warnings")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tapenet", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _add_globals(parser, lambda v: v)
    common = argparse.ArgumentParser(add_help=False)
    _add_globals(common, lambda v: argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("generate", parents=[common], help="generate random scenarios")
    p.add_argument("--config", required=True, help="generation config JSON")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--n-scenarios", type=int, help="override n_scenarios from the config")
    p.add_argument("--split-ratios", type=float, nargs=3, default=(0.75, 0.15, 0.10),
                   metavar=("TRAIN", "VAL", "TEST"))

    p = sub.add_parser("simulate", parents=[common], help="compute ground truth with the simulator")
    p.add_argument("--dataset", required=True, help="dataset directory or a single scenario file")
    p.add_argument("--out", required=True, help="directory for ground-truth JSON files")
    p.add_argument("--packets-csv", action="store_true", help="also write per-packet CSV files")

    p = sub.add_parser("train", parents=[common], help="train a model on a simulated dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--truth", required=True, help="ground-truth directory from 'simulate'")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--config", help="TrainConfig JSON, optionally with a 'model' section")
    p.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    p.add_argument("--epochs", type=int)
    p.add_argument("--steps", type=int, help="gradient steps per epoch")
    p.add_argument("--lr", type=float)

    p = sub.add_parser("predict", parents=[common], help="predict per-window flow statistics")
    p.add_argument("--model", required=True)
    p.add_argument("--scenario", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", parents=[common], help="score a checkpoint against ground truth")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--split", choices=SPLITS + ("all",), default="test")
    p.add_argument("--out", required=True, help="report directory")

    p = sub.add_parser("bench", parents=[common], help="time inference over a sweep")
    p.add_argument("--model", required=True)
    p.add_argument("--scenario", help="base scenario for packets/window sweeps")
    p.add_argument("--sweep", required=True, help="packets=1x,10x,100x | nodes=5,8,12 | window=0.2,0.1,0.05")
    p.add_argument("--config", help="generation config JSON for the nodes sweep")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--out", required=True, help="JSON file for the timing rows")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr, force=True)
    if args.command in ("generate", "train") and args.seed is None:
        parser.print_usage(sys.stderr)
        print(f"tapenet {args.command}: error: --seed is required", file=sys.stderr)
        return 2
    if args.jobs < 1:
        parser.print_usage(sys.stderr)
        print("tapenet: error: --jobs must be >= 1", file=sys.stderr)
        return 2

    m = RunManifest(subcommand=args.command, seeds={"seed": args.seed})
    t0 = time.perf_counter()
    try:
        COMMANDS[args.command](args, m)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"tapenet {args.command}: error: {e}", file=sys.stderr)
        return 2
    except (ScenarioError, GenerationError, WindowMismatchError, TrainingDiverged,
            ValueError, OSError, KeyError) as e:
        print(f"tapenet {args.command}: error: {e}", file=sys.stderr)
        return 1
    m.wall_time_s = time.perf_counter() - t0
    out = getattr(args, "out", None)
    if out:
        m.outputs.setdefault("path", str(out))
        m.write(manifest_path(Path(out)))
    return 0


if __name__ == "__main__":
    sys.exit(main())
