#!/usr/bin/env python3
"""Command-line interface for pipeline training experiments.

Subcommands:

- ``run`` – execute every run of an experiment file and write CSV/JSON results.
- ``sweep`` – same as ``run``; the file's ``[sweep]`` axes are expanded.
- ``validate`` – parse and expand an experiment file without running it.
- ``timeline`` – dump the event timetable of a schedule as CSV.

Experiment files are INI text::

    [run]               base keys shared by every run
    [run.<name>]        a named run overriding base keys
    [sweep]             comma-separated values per axis, crossed with every run

Exit codes: 0 success, 1 configuration error, 2 run failure.
"""

import argparse
import configparser
import itertools
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Tuple

import pandas as pd
from dotenv import load_dotenv

from analog_device import DeviceConfig
from net_model import ActivationKind, LossKind
from pipeline_schedule import (SCHEDULES, ScheduleKind, closed_form_density, timeline_events,
                               timeline_frame, validate_timeline)
from sim_errors import ConfigError, SimulationError
from synth_data import Dataset, gen_gaussian_mixture, gen_teacher_regression, load_csv, train_eval_split
from train_loop import RunConfig, RunMetrics, run

load_dotenv()

RUN_KEYS = (
    "schedule", "M", "dims", "hidden", "activation", "output_activation", "loss", "device",
    "tau", "saturation_limit", "saturation_policy", "alpha", "epochs", "steps", "B_mini",
    "B_micro", "noise_sigma", "seed", "data_seed", "eval_every", "eval_batch",
    "lr_decay_epochs", "lr_decay_factor", "init_scale", "amplification_u", "target_loss",
    "target_accuracy", "data", "n", "d", "classes", "separation", "teacher_stages", "out_dim",
    "csv_path", "normalize", "eval_n",
)
EXPERIMENT_KEYS = ("out_dir", "baseline", "workers")
LIST_KEYS = ("dims", "lr_decay_epochs")
DATA_KINDS = ("teacher", "mixture", "csv")


def env_defaults() -> Dict[str, Any]:
    """Defaults taken from the environment (and a local .env file)."""
    try:
        return {
            "out_dir": os.getenv("PIPESIM_OUT_DIR", "results"),
            "seed": int(os.getenv("PIPESIM_SEED", "0")),
            "workers": int(os.getenv("PIPESIM_WORKERS", "1")),
            "eval_every": int(os.getenv("PIPESIM_EVAL_EVERY", "50")),
        }
    except ValueError as e:
        raise ConfigError(f"bad PIPESIM_* environment value: {e}")


@dataclass(frozen=True)
class DataSpec:
    """Where a run's samples come from; equal specs share one loaded dataset."""
    kind: str = "teacher"
    n: int = 1024
    d: int = 8
    classes: int = 2
    separation: float = 2.0
    teacher_stages: int = 2
    out_dim: int = 1
    csv_path: Optional[str] = None
    normalize: bool = True
    eval_n: int = 0
    seed: int = 0


@dataclass
class RunSpec:
    name: str
    config: RunConfig
    data: DataSpec
    coords: Dict[str, str] = field(default_factory=dict)


@dataclass
class ExperimentConfig:
    """A parsed experiment file: raw sections (for dumping) plus the expanded runs."""
    name: str
    runs: List[RunSpec]
    base: Dict[str, str]
    named: Dict[str, Dict[str, str]]
    sweep: Dict[str, List[str]]
    out_dir: str = "results"
    baseline: str = "nopipe"
    workers: int = 1


@dataclass
class RunResult:
    name: str
    success: bool
    schedule: str
    M: int
    B: int
    B_micro: int
    tau: Optional[float]
    coords: Dict[str, str]
    dataset_size: int = 0
    csv_path: Optional[str] = None
    json_path: Optional[str] = None
    summary: Dict[str, Any] = field(default_factory=dict)
    errors: List[str] = field(default_factory=list)
    metrics: Optional[RunMetrics] = field(default=None, repr=False)


@dataclass
class ResultBundle:
    out_dir: str
    runs: List[RunResult]
    speedups: List[Dict[str, Any]] = field(default_factory=list)
    bundle_path: Optional[str] = None

    @property
    def success(self) -> bool:
        return all(r.success for r in self.runs)

    @property
    def failed(self) -> List[RunResult]:
        return [r for r in self.runs if not r.success]


def _int(raw: Dict[str, str], key: str, default: Optional[int] = None) -> Optional[int]:
    if key not in raw or raw[key].strip() == "":
        return default
    try:
        return int(raw[key])
    except ValueError:
        raise ConfigError(f"'{raw[key]}' is not an integer", key=key)


def _float(raw: Dict[str, str], key: str, default: Optional[float] = None) -> Optional[float]:
    if key not in raw or raw[key].strip() == "":
        return default
    try:
        return float(raw[key])
    except ValueError:
        raise ConfigError(f"'{raw[key]}' is not a number", key=key)


def _int_list(raw: Dict[str, str], key: str) -> Optional[List[int]]:
    if key not in raw or raw[key].strip() == "":
        return None
    try:
        return [int(v) for v in raw[key].split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"'{raw[key]}' is not a comma-separated list of integers", key=key)


def _bool(raw: Dict[str, str], key: str, default: bool) -> bool:
    if key not in raw:
        return default
    value = raw[key].strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"'{raw[key]}' is not a boolean", key=key)


def _check_keys(section: str, keys, allowed) -> None:
    for key in keys:
        if key not in allowed:
            raise ConfigError(f"unknown key '{key}' in [{section}]", key=key)


def _device(raw: Dict[str, str]) -> DeviceConfig:
    tau = _float(raw, "tau", math.inf)
    mode = raw.get("device", "digital" if math.isinf(tau) else "analog").strip().lower()
    limit = _float(raw, "saturation_limit", 0.95)
    policy = raw.get("saturation_policy", "warn").strip().lower()
    if mode == "digital":
        if not math.isinf(tau):
            raise ConfigError("a digital device takes no finite tau", key="tau")
        return DeviceConfig.digital(limit, policy)
    if mode != "analog":
        raise ConfigError(f"unknown device '{mode}'", key="device")
    if math.isinf(tau):
        raise ConfigError("an analog device needs a finite tau", key="tau")
    return DeviceConfig.analog(tau, limit, policy)


def build_run(name: str, raw: Dict[str, str], coords: Optional[Dict[str, str]] = None) -> RunSpec:
    """Turn one fully merged key/value set into a validated run."""
    env = env_defaults()
    data_kind = raw.get("data", "teacher").strip().lower()
    if data_kind not in DATA_KINDS:
        raise ConfigError(f"unknown data source '{data_kind}'", key="data")
    if data_kind == "csv" and not raw.get("csv_path"):
        raise ConfigError("data = csv needs csv_path", key="csv_path")

    dims = _int_list(raw, "dims")
    M = _int(raw, "M")
    if dims is None:
        if data_kind == "csv":
            raise ConfigError("csv data needs explicit dims", key="dims")
        d = _int(raw, "d", 8)
        hidden = _int(raw, "hidden", d)
        out = _int(raw, "classes", 2) if data_kind == "mixture" else _int(raw, "out_dim", 1)
        M = 3 if M is None else M
        if M < 1:
            raise ConfigError("M must be >= 1", key="M")
        dims = [d] + [hidden] * (M - 1) + [out]
    elif M is not None and M != len(dims) - 1:
        raise ConfigError(f"M={M} but dims lists {len(dims) - 1} stages", key="M")

    seed = _int(raw, "seed", env["seed"])
    data = DataSpec(
        kind=data_kind,
        n=_int(raw, "n", 1024),
        d=_int(raw, "d", dims[0]),
        classes=_int(raw, "classes", dims[-1]),
        separation=_float(raw, "separation", 2.0),
        teacher_stages=_int(raw, "teacher_stages", 2),
        out_dim=_int(raw, "out_dim", dims[-1]),
        csv_path=raw.get("csv_path"),
        normalize=_bool(raw, "normalize", True),
        eval_n=_int(raw, "eval_n", 0),
        seed=_int(raw, "data_seed", seed),
    )
    if data.kind != "csv" and data.d != dims[0]:
        raise ConfigError(f"d={data.d} does not match dims[0]={dims[0]}", key="d")
    if data.kind == "mixture" and data.classes != dims[-1]:
        raise ConfigError(f"classes={data.classes} does not match dims[-1]={dims[-1]}", key="classes")

    kind = raw.get("schedule", "async").strip().lower()
    if kind not in SCHEDULES:
        raise ConfigError(f"unknown schedule '{kind}' (expected one of {SCHEDULES})", key="schedule")
    B_mini = _int(raw, "B_mini", 1)
    B_micro = _int(raw, "B_micro", 1)
    if B_mini < 1 or B_micro < 1 or B_mini % B_micro != 0:
        raise ConfigError("B_mini not divisible by B_micro", key="B_mini")
    schedule = ScheduleKind(kind, B_mini // B_micro if kind == "sync" else 1)

    default_loss = "softmax_ce" if data_kind == "mixture" else "mse"
    cfg = RunConfig(
        name=name,
        schedule=schedule,
        dims=dims,
        activation=ActivationKind.from_name(raw.get("activation", "tanh")),
        output_activation=ActivationKind.from_name(raw.get("output_activation", "identity")),
        loss=LossKind(raw.get("loss", default_loss).strip().lower()),
        device=_device(raw),
        alpha=_float(raw, "alpha", 0.1),
        epochs=_int(raw, "epochs", 1),
        steps=_int(raw, "steps"),
        B_mini=B_mini,
        B_micro=B_micro,
        noise_sigma=_float(raw, "noise_sigma", 0.0),
        seed=seed,
        eval_every=_int(raw, "eval_every", env["eval_every"]),
        eval_batch=_int(raw, "eval_batch", 256),
        lr_decay_epochs=tuple(_int_list(raw, "lr_decay_epochs") or ()),
        lr_decay_factor=_float(raw, "lr_decay_factor", 0.1),
        init_scale=_float(raw, "init_scale", 1.0),
        amplification_u=_float(raw, "amplification_u", 1.0),
        target_loss=_float(raw, "target_loss"),
        target_accuracy=_float(raw, "target_accuracy"),
    )
    return RunSpec(name=name, config=cfg, data=data, coords=dict(coords or {}))


def _sweep_points(sweep: Dict[str, List[str]]) -> List[Dict[str, str]]:
    axes = {k: v for k, v in sweep.items() if k != "replicates"}
    points = [dict(zip(axes, values)) for values in itertools.product(*axes.values())] if axes else [{}]
    replicates = _int({"replicates": sweep.get("replicates", ["1"])[0]}, "replicates")
    if replicates < 1:
        raise ConfigError("replicates must be >= 1", key="replicates")
    if replicates == 1:
        return points
    return [dict(p, replicate=str(r)) for p in points for r in range(replicates)]


def _point_name(run_name: str, point: Dict[str, str]) -> str:
    if not point:
        return run_name
    parts = [f"{k}-{v}" for k, v in point.items()]
    return "__".join([run_name] + parts)


def expand_sweep(base: Dict[str, str], named: Dict[str, Dict[str, str]],
                 sweep: Dict[str, List[str]]) -> List[RunSpec]:
    """Cross every named run with every sweep point; names must stay unique."""
    runs = named or {"run": {}}
    specs: List[RunSpec] = []
    seen = set()
    for run_name, overrides in runs.items():
        for point in _sweep_points(sweep):
            raw = dict(base)
            raw.update(overrides)
            raw.update({k: v for k, v in point.items() if k != "replicate"})
            if "replicate" in point:
                raw["seed"] = str(_int(raw, "seed", env_defaults()["seed"]) + int(point["replicate"]))
            name = _point_name(run_name, point)
            if name in seen:
                raise ConfigError(f"duplicate run name '{name}'", key="name")
            seen.add(name)
            specs.append(build_run(name, raw, point))
    return specs


def _read_sections(text: str, source: str) -> Tuple[Dict[str, str], Dict[str, Dict[str, str]], Dict[str, List[str]]]:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keys like B_mini and M are case-sensitive
    try:
        parser.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(f"{source}: {e}")

    base: Dict[str, str] = {}
    named: Dict[str, Dict[str, str]] = {}
    sweep: Dict[str, List[str]] = {}
    for section in parser.sections():
        items = dict(parser.items(section))
        if section == "run":
            _check_keys(section, items, RUN_KEYS + EXPERIMENT_KEYS)
            base = items
        elif section.startswith("run."):
            _check_keys(section, items, RUN_KEYS)
            named[section[len("run."):]] = items
        elif section == "sweep":
            _check_keys(section, items, RUN_KEYS + ("replicates",))
            for key, value in items.items():
                if key in LIST_KEYS:
                    raise ConfigError(f"list-valued key '{key}' cannot be swept", key=key)
                values = [v.strip() for v in value.split(",") if v.strip()]
                if not values:
                    raise ConfigError("sweep axis has no values", key=key)
                sweep[key] = values
        else:
            raise ConfigError(f"unknown section [{section}]", key=section)
    return base, named, sweep


def parse_config_text(text: str, name: str = "experiment", seed_override: Optional[int] = None) -> ExperimentConfig:
    base, named, sweep = _read_sections(text, name)
    if seed_override is not None:
        base["seed"] = str(seed_override)
        for overrides in named.values():
            overrides.pop("seed", None)
    env = env_defaults()
    experiment = {k: base.pop(k) for k in EXPERIMENT_KEYS if k in base}
    baseline = experiment.get("baseline", "nopipe").strip().lower()
    if baseline not in SCHEDULES:
        raise ConfigError(f"unknown baseline schedule '{baseline}'", key="baseline")
    workers = _int(experiment, "workers", env["workers"])
    if workers < 1:
        raise ConfigError("workers must be >= 1", key="workers")

    runs = expand_sweep(base, named, sweep)
    base.update(experiment)
    return ExperimentConfig(
        name=name,
        runs=runs,
        base=base,
        named=named,
        sweep=sweep,
        out_dir=experiment.get("out_dir", env["out_dir"]),
        baseline=baseline,
        workers=workers,
    )


def parse_config(path: str, seed_override: Optional[int] = None) -> ExperimentConfig:
    """Read, validate and expand an experiment file."""
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}", key="config")
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    name = os.path.splitext(os.path.basename(path))[0]
    return parse_config_text(text, name, seed_override)


def dump_config(cfg: ExperimentConfig) -> str:
    """Write the experiment back in the same INI grammar."""
    lines = ["[run]"]
    lines += [f"{k} = {v}" for k, v in cfg.base.items()]
    for run_name, overrides in cfg.named.items():
        lines += ["", f"[run.{run_name}]"]
        lines += [f"{k} = {v}" for k, v in overrides.items()]
    if cfg.sweep:
        lines += ["", "[sweep]"]
        lines += [f"{k} = {', '.join(v)}" for k, v in cfg.sweep.items()]
    return "\n".join(lines) + "\n"


def load_dataset(spec: DataSpec) -> Tuple[Dataset, Optional[Dataset]]:
    """Build (train, eval) for a data spec; eval is None when eval_n is 0."""
    if spec.kind == "teacher":
        ds = gen_teacher_regression(spec.seed, spec.n, spec.d, spec.teacher_stages, out_dim=spec.out_dim)
    elif spec.kind == "mixture":
        ds = gen_gaussian_mixture(spec.seed, spec.n, spec.d, spec.classes, spec.separation)
    else:
        ds = load_csv(spec.csv_path, normalize=spec.normalize)
    if spec.eval_n > 0:
        return train_eval_split(ds, spec.eval_n, spec.seed)
    return ds, None


def _tau(cfg: RunConfig) -> Optional[float]:
    return None if cfg.device.is_digital else cfg.device.tau


def _summary_record(spec: RunSpec, metrics: RunMetrics, dataset_size: int) -> Dict[str, Any]:
    cfg, s = spec.config, metrics.summary
    return {
        "run_name": spec.name,
        "schedule": cfg.schedule.kind,
        "M": cfg.M,
        "B": cfg.B,
        "B_mini": cfg.B_mini,
        "B_micro": cfg.B_micro,
        "tau": _tau(cfg),
        "device": cfg.device.mode,
        "alpha": cfg.alpha,
        "seed": cfg.seed,
        "dataset_size": dataset_size,
        "updates_total": s.updates_total,
        "cycles_total": s.cycles_total,
        "samples_total": s.samples_total,
        "measured_density": s.measured_density,
        "steady_density": s.steady_density,
        "cycles_to_target": s.cycles_to_target,
        "updates_to_target": s.updates_to_target,
        "final_loss": s.final_loss,
        "final_accuracy": s.final_accuracy,
        "max_saturation_degree": s.max_saturation_degree,
        "saturation_events": s.saturation_events,
        "amplification_S": s.amplification_S,
        "amplification_Sprime_u": s.amplification_Sprime_u,
        "amplification_S_printed": s.amplification_S_printed,
        "sweep": spec.coords,
    }


def _execute(spec: RunSpec, data: Tuple[Dataset, Optional[Dataset]], out_dir: str,
             verbose: bool) -> RunResult:
    cfg = replace(spec.config, verbose=verbose)
    result = RunResult(name=spec.name, success=False, schedule=cfg.schedule.label, M=cfg.M,
                       B=cfg.B, B_micro=cfg.B_micro, tau=_tau(cfg), coords=spec.coords)
    train, held_out = data
    result.dataset_size = train.n
    if verbose:
        print(f"⚙️ Running {spec.name} ({cfg.schedule.label}, M={cfg.M}, tau={cfg.device.tau})")
    try:
        metrics = run(cfg, train, held_out)
    except SimulationError as e:
        result.errors.append(f"{type(e).__name__}: {e}")
        if verbose:
            print(f"❌ {spec.name}: {e}")
        return result

    result.metrics = metrics
    result.summary = _summary_record(spec, metrics, train.n)
    result.csv_path = os.path.join(out_dir, f"{spec.name}.csv")
    result.json_path = os.path.join(out_dir, f"{spec.name}.json")
    metrics.to_frame().to_csv(result.csv_path, index=False, float_format="%.17g")
    with open(result.json_path, "w", encoding="utf-8") as f:
        json.dump(result.summary, f, indent=2)
    result.success = True
    if verbose:
        print(f"✅ {spec.name}: final eval loss {metrics.summary.final_loss:.5f} "
              f"after {metrics.summary.cycles_total} cycles")
    return result


def _group_key(result: RunResult) -> Tuple:
    return tuple(sorted((k, v) for k, v in result.coords.items() if k != "schedule"))


def speedup_table(runs: List[RunResult], baseline: str = "nopipe") -> List[Dict[str, Any]]:
    """cycles_to_target(baseline) / cycles_to_target(run) within each group of sweep coordinates."""
    groups: Dict[Tuple, List[RunResult]] = {}
    for r in runs:
        if r.success:
            groups.setdefault(_group_key(r), []).append(r)

    rows = []
    for key, members in groups.items():
        base = next((r for r in members if r.summary["schedule"] == baseline), None)
        for r in members:
            base_cycles = base.summary["cycles_to_target"] if base else None
            run_cycles = r.summary["cycles_to_target"]
            throughput = None
            if base is not None:
                ratio = (closed_form_density(ScheduleKind(r.summary["schedule"], r.B), r.M)
                         / closed_form_density(ScheduleKind(baseline, base.B), base.M))
                throughput = float(ratio)
            rows.append({
                "group": ";".join(f"{k}={v}" for k, v in key),
                "run_name": r.name,
                "schedule": r.schedule,
                "M": r.M,
                "B": r.B,
                "baseline": base.name if base else None,
                "cycles_to_target": run_cycles,
                "baseline_cycles_to_target": base_cycles,
                "speedup": base_cycles / run_cycles if base_cycles and run_cycles else None,
                "throughput_speedup": throughput,
                "final_loss": r.summary["final_loss"],
                "final_accuracy": r.summary["final_accuracy"],
            })
    return rows


def run_experiment(cfg: ExperimentConfig, verbose: bool = True) -> ResultBundle:
    """Execute every run (concurrently when workers > 1) and write the result files."""
    os.makedirs(cfg.out_dir, exist_ok=True)
    if verbose:
        print(f"🚀 Experiment '{cfg.name}': {len(cfg.runs)} runs -> {cfg.out_dir}")

    datasets: Dict[DataSpec, Any] = {}
    for spec in cfg.runs:
        if spec.data not in datasets:
            try:
                datasets[spec.data] = load_dataset(spec.data)
            except SimulationError as e:
                datasets[spec.data] = e

    def task(spec: RunSpec) -> RunResult:
        data = datasets[spec.data]
        if isinstance(data, Exception):
            return RunResult(name=spec.name, success=False, schedule=spec.config.schedule.label,
                             M=spec.config.M, B=spec.config.B, B_micro=spec.config.B_micro,
                             tau=_tau(spec.config), coords=spec.coords,
                             errors=[f"{type(data).__name__}: {data}"])
        return _execute(spec, data, cfg.out_dir, verbose)

    with ThreadPoolExecutor(max_workers=max(1, cfg.workers)) as executor:
        results = list(executor.map(task, cfg.runs))

    bundle = ResultBundle(out_dir=cfg.out_dir, runs=results,
                          speedups=speedup_table(results, cfg.baseline))
    pd.DataFrame(bundle.speedups, columns=SPEEDUP_COLUMNS).to_csv(
        os.path.join(cfg.out_dir, "speedup.csv"), index=False)
    bundle.bundle_path = os.path.join(cfg.out_dir, "bundle.json")
    with open(bundle.bundle_path, "w", encoding="utf-8") as f:
        json.dump({
            "experiment": cfg.name,
            "success": bundle.success,
            "runs": [{"name": r.name, "success": r.success, "csv": r.csv_path,
                      "json": r.json_path, "errors": r.errors} for r in results],
            "speedups": bundle.speedups,
        }, f, indent=2)

    if verbose:
        ok = len(results) - len(bundle.failed)
        marker = "✅" if bundle.success else "⚠️"
        print(f"{marker} {ok}/{len(results)} runs succeeded")
    return bundle


SPEEDUP_COLUMNS = ["group", "run_name", "schedule", "M", "B", "baseline", "cycles_to_target",
                   "baseline_cycles_to_target", "speedup", "throughput_speedup",
                   "final_loss", "final_accuracy"]


def emit_plotdata(bundle: ResultBundle) -> List[str]:
    """Write accuracy_vs_epoch.csv, accuracy_vs_cycle.csv and speedup_vs_stages.csv."""
    by_epoch, by_cycle, by_stages = [], [], []
    for r in bundle.runs:
        if not r.success or r.metrics is None:
            continue
        density = r.summary["measured_density"]
        for rec in r.metrics.records:
            by_epoch.append({
                "run_name": r.name, "schedule": r.schedule, "update_k": rec.update_k,
                "epoch": rec.samples_done / r.dataset_size,
                "eval_loss": rec.eval_loss, "accuracy": rec.accuracy,
            })
            by_cycle.append({
                "run_name": r.name, "schedule": r.schedule, "clock_cycle": rec.clock_cycle,
                # cycles scaled by density give the sample count a full pipeline would have seen
                "equivalent_epoch": rec.clock_cycle * density * r.B_micro / (2.0 * r.dataset_size),
                "eval_loss": rec.eval_loss, "accuracy": rec.accuracy,
            })
        schedule = ScheduleKind(r.summary["schedule"], r.B)
        nopipe = closed_form_density(ScheduleKind("nopipe"), r.M)
        by_stages.append({
            "M": r.M, "run_name": r.name, "schedule": r.schedule, "B": r.B,
            "throughput_speedup": float(closed_form_density(schedule, r.M) / nopipe),
            "measured_speedup": r.summary["measured_density"] / float(nopipe),
            "steady_speedup": r.summary["steady_density"] / float(nopipe),
        })

    paths = []
    for filename, rows, columns in (
        ("accuracy_vs_epoch.csv", by_epoch,
         ["run_name", "schedule", "update_k", "epoch", "eval_loss", "accuracy"]),
        ("accuracy_vs_cycle.csv", by_cycle,
         ["run_name", "schedule", "clock_cycle", "equivalent_epoch", "eval_loss", "accuracy"]),
        ("speedup_vs_stages.csv", sorted(by_stages, key=lambda row: (row["M"], row["run_name"])),
         ["M", "run_name", "schedule", "B", "throughput_speedup", "measured_speedup", "steady_speedup"]),
    ):
        path = os.path.join(bundle.out_dir, filename)
        pd.DataFrame(rows, columns=columns).to_csv(path, index=False)
        paths.append(path)
    return paths


def cmd_run(args) -> int:
    cfg = parse_config(args.config, args.seed)
    if args.out:
        cfg.out_dir = args.out
    if args.workers:
        cfg.workers = args.workers
    bundle = run_experiment(cfg, verbose=not args.quiet)
    paths = emit_plotdata(bundle)
    if not args.quiet:
        print(f"📊 Plot data: {', '.join(paths)}")
        for r in bundle.failed:
            print(f"❌ {r.name}: {'; '.join(r.errors)}")
    return 0 if bundle.success else 2


def cmd_validate(args) -> int:
    cfg = parse_config(args.config, args.seed)
    if not args.quiet:
        print(f"🔍 {args.config}: {len(cfg.runs)} runs")
        for spec in cfg.runs:
            c = spec.config
            print(f"  - {spec.name}: {c.schedule.label}, dims={c.dims}, tau={c.device.tau}, "
                  f"alpha={c.alpha}, B_mini={c.B_mini}, B_micro={c.B_micro}, seed={c.seed}")
        print("✅ Config is valid")
    return 0


def cmd_timeline(args) -> int:
    schedule = ScheduleKind(args.schedule, args.B if args.schedule == "sync" else 1)
    events = timeline_events(schedule, args.M, args.K)
    validate_timeline(events, args.M)
    frame = timeline_frame(events)
    out_dir = args.out or env_defaults()["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, f"timeline_{schedule.kind}_M{args.M}_K{args.K}.csv")
    frame.to_csv(path, index=False)
    if not args.quiet:
        span = int(frame["cycle"].max()) + 1
        print(f"✅ {len(events)} events over {span} cycles "
              f"(density {2 * args.K / span:.4f}, closed form {float(closed_form_density(schedule, args.M)):.4f})")
        print(f"💾 Timeline saved to {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Simulate pipeline training on analog devices")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help="Output directory (default: $PIPESIM_OUT_DIR or results)")
    common.add_argument("--seed", type=int, help="Override the base seed")
    common.add_argument("--quiet", action="store_true", help="Suppress progress output")
    common.add_argument("--workers", type=int, help="Concurrent runs in a sweep")

    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("run", "Run every experiment in a config file"),
                            ("sweep", "Expand the [sweep] axes and run every point"),
                            ("validate", "Parse and expand a config without running it")):
        p = sub.add_parser(name, help=help_text, parents=[common])
        p.add_argument("config", help="Path to the experiment file")

    tl = sub.add_parser("timeline", help="Dump a schedule's event timetable", parents=[common])
    tl.add_argument("M", type=int, help="Number of stages")
    tl.add_argument("K", type=int, help="Number of micro-batches")
    tl.add_argument("--schedule", choices=SCHEDULES, default="async")
    tl.add_argument("--B", type=int, default=1, help="Micro-batches per mini-batch (sync)")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {"run": cmd_run, "sweep": cmd_run, "validate": cmd_validate, "timeline": cmd_timeline}
    try:
        return handlers[args.command](args)
    except ConfigError as e:
        print(f"❌ Configuration error: {e}", file=sys.stderr)
        return 1
    except SimulationError as e:
        print(f"❌ Run failed: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
