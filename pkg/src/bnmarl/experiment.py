"""Experiment configuration, per-run CSV records, sweeps and summaries."""

from __future__ import annotations

import copy
import csv
import dataclasses
import io
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .bn_policy import TabularBnPolicy, fixed_topology
from .dag_sampler import ConstantSchedule, DensitySchedule, dag_density
from .envs import CoordinationGameSpec, coordination_game
from .exact_pg import AscentConfig, AscentStep, ascend
from .marl_ac import ACConfig, train
from .solvers import nash_gap, optimal_value, poa

log = logging.getLogger(__name__)

TOPOLOGIES = ("uncorrelated", "line", "fully", "context_aware")
MODES = ("tabular_exact", "actor_critic")


class ConfigError(ValueError):
    pass


PRESETS = {
    "coordination_game": {
        "env_name": "coordination",
        "env": {"n_agents": 2, "epsilon": 0.1, "gamma": 0.95, "episode_length": 20},
        "actor_critic": {"total_steps": 200_000, "n_rollout_threads": 32, "ppo_epochs": 5,
                         "lr_actor": 7e-4, "lr_critic": 7e-4, "hidden": 64,
                         "eval_episodes": 100},
    },
    "aloha": {
        "env_name": "aloha",
        "env": {"grid_shape": [2, 5], "max_backlog": 5, "new_message_prob": 0.6,
                "reward_success": 0.1, "reward_collision": -10.0, "episode_length": 25},
        "actor_critic": {"total_steps": 1_000_000, "n_rollout_threads": 32, "ppo_epochs": 5,
                         "lr_actor": 7e-4, "lr_critic": 7e-4, "hidden": 64,
                         "eval_episodes": 100},
    },
}


@dataclass
class TabularSettings:
    step_size: Optional[float] = None
    max_iters: int = 1000
    grad_tol: float = 1e-8
    log_every: int = 1
    init: str = "zeros"
    init_scale: float = 0.1


@dataclass
class ExperimentConfig:
    mode: str = "tabular_exact"
    env_name: str = "coordination"
    env: dict = field(default_factory=dict)
    topologies: list = field(default_factory=lambda: ["uncorrelated", "line", "fully"])
    seeds: list = field(default_factory=lambda: [0])
    tabular: TabularSettings = field(default_factory=TabularSettings)
    actor_critic: dict = field(default_factory=dict)
    schedule: object = field(default_factory=ConstantSchedule)
    workers: int = 1
    record_wall_time: bool = False

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.topologies:
            raise ConfigError("at least one topology is required")
        for t in self.topologies:
            if t not in TOPOLOGIES:
                raise ConfigError(f"unknown topology {t!r}; expected one of {TOPOLOGIES}")
            if t == "context_aware" and self.mode != "actor_critic":
                raise ConfigError("topology context_aware requires mode actor_critic")
        if self.mode == "tabular_exact" and self.env_name != "coordination":
            raise ConfigError("tabular_exact mode supports the coordination game only")
        if not self.seeds or not all(isinstance(s, int) and s >= 0 for s in self.seeds):
            raise ConfigError("seeds must be a non-empty list of non-negative integers")
        if self.tabular.init not in ("gaussian", "zeros"):
            raise ConfigError("tabular.init must be 'gaussian' or 'zeros'")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        try:
            if self.mode == "tabular_exact":
                CoordinationGameSpec(**self.env)
            else:
                self.ac_config("uncorrelated").make_env()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid environment/hyperparameters: {exc}") from exc
        return self

    def ac_config(self, topology: str) -> ACConfig:
        kwargs = dict(self.actor_critic)
        env_kwargs = dict(self.env)
        if "grid_shape" in env_kwargs:
            env_kwargs["grid_shape"] = tuple(env_kwargs["grid_shape"])
        return ACConfig(env=self.env_name, env_kwargs=env_kwargs, topology=topology,
                        schedule=self.schedule, **kwargs)


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _parse_schedule(doc) -> object:
    if doc is None:
        return ConstantSchedule()
    if not isinstance(doc, dict):
        raise ConfigError("schedule must be a mapping")
    try:
        if set(doc) <= {"eta", "alpha"}:
            return ConstantSchedule(float(doc.get("eta", 1.0)), float(doc.get("alpha", 0.0)))
        return DensitySchedule(**doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid schedule: {exc}") from exc


def _parse_seeds(value) -> list:
    if isinstance(value, int):
        return list(range(value))
    if isinstance(value, dict) and "range" in value:
        return list(range(int(value.get("start", 0)), int(value.get("start", 0)) + int(value["range"])))
    if isinstance(value, list):
        return value
    raise ConfigError(f"cannot interpret seeds {value!r}")


def parse_seed_arg(text: str) -> list:
    """``"7"``, ``"0,3,5"`` or ``"0-49"`` (inclusive range)."""
    seeds = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            lo, hi = part.split("-", 1)
            seeds.extend(range(int(lo), int(hi) + 1))
        elif part:
            seeds.append(int(part))
    return seeds


def config_from_dict(doc: dict) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a mapping")
    doc = dict(doc)
    preset = doc.pop("defaults", None)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown defaults preset {preset!r}; choose from {sorted(PRESETS)}")
        doc = _merge(PRESETS[preset], doc)
    known = {f.name for f in fields(ExperimentConfig)} | {"topology"}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    topologies = doc.pop("topology", None)
    if topologies is not None:
        doc["topologies"] = [topologies] if isinstance(topologies, str) else list(topologies)
    if "seeds" in doc:
        doc["seeds"] = _parse_seeds(doc["seeds"])
    try:
        doc["tabular"] = TabularSettings(**doc.get("tabular", {}))
    except TypeError as exc:
        raise ConfigError(f"invalid tabular settings: {exc}") from exc
    doc["schedule"] = _parse_schedule(doc.get("schedule"))
    ac_fields = {f.name for f in fields(ACConfig)} - {"env", "env_kwargs", "topology", "schedule"}
    bad = set(doc.get("actor_critic", {})) - ac_fields
    if bad:
        raise ConfigError(f"unknown actor_critic keys: {sorted(bad)}")
    return ExperimentConfig(**doc).validate()


def load_config(path) -> ExperimentConfig:
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(doc or {})


# ---------------------------------------------------------------------------
# Records


@dataclass
class ExperimentRecord:
    seed: int
    topology: str
    step: int
    value: Optional[float] = None
    poa: Optional[float] = None
    nash_gap: Optional[float] = None
    dag_density: Optional[float] = None
    eta: Optional[float] = None
    alpha: Optional[float] = None
    grad_norm: Optional[float] = None
    wall_time: Optional[float] = None


RECORD_FIELDS = [f.name for f in fields(ExperimentRecord)]
_INT_FIELDS = {"seed", "step"}


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def records_to_csv(records: list) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RECORD_FIELDS)
    for r in records:
        writer.writerow([_fmt(getattr(r, name)) for name in RECORD_FIELDS])
    return buf.getvalue()


def records_from_csv(text: str) -> list:
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if header != RECORD_FIELDS:
        raise ValueError(f"unexpected CSV header {header}")
    out = []
    for row in reader:
        vals = {}
        for name, cell in zip(header, row):
            if cell == "":
                vals[name] = None
            elif name in _INT_FIELDS:
                vals[name] = int(cell)
            elif name == "topology":
                vals[name] = cell
            else:
                vals[name] = float(cell)
        out.append(ExperimentRecord(**vals))
    return out


# ---------------------------------------------------------------------------
# Runs


def run_tabular(config: ExperimentConfig, topology: str, seed: int) -> list:
    spec = CoordinationGameSpec(**config.env)
    game = coordination_game(spec)
    dag = fixed_topology(topology, game.n_agents)
    ts = config.tabular
    if ts.init == "zeros":
        policy = TabularBnPolicy.zeros(dag, game.action_counts, game.n_states)
    else:
        policy = TabularBnPolicy.gaussian(dag, game.action_counts, game.n_states,
                                          np.random.default_rng(seed), ts.init_scale)
    v_star = optimal_value(game)
    density = dag_density(dag)
    start = time.perf_counter()

    def metrics(step: AscentStep) -> dict:
        return {"nash_gap": nash_gap(game, step.policy, step.value),
                "poa": poa(game, step.policy, step.value, v_star)}

    traj = ascend(game, policy, AscentConfig(step_size=ts.step_size, max_iters=ts.max_iters,
                                             grad_tol=ts.grad_tol, log_every=ts.log_every),
                  callback=metrics)
    wall = (time.perf_counter() - start) if config.record_wall_time else None
    return [ExperimentRecord(seed, topology, s.iteration, s.value, s.metrics["poa"],
                             s.metrics["nash_gap"], density, None, None, s.grad_norm, wall)
            for s in traj]


def run_actor_critic(config: ExperimentConfig, topology: str, seed: int) -> list:
    result = train(config.ac_config(topology), seed=seed, record_wall_time=config.record_wall_time)
    records = [ExperimentRecord(seed, topology, e.step, e.mean_return, None, None, e.dag_density,
                                e.eta, e.alpha, e.grad_norm,
                                e.wall_time if config.record_wall_time else None)
               for e in result.logs]
    # the final row reports the evaluation of the final policy
    records[-1].value = result.eval_return
    records[-1].dag_density = result.eval_density
    return records


def run_single(config: ExperimentConfig, topology: str, seed: int) -> list:
    if config.mode == "tabular_exact":
        return run_tabular(config, topology, seed)
    return run_actor_critic(config, topology, seed)


def _task(args):
    config, topology, seed = args
    try:
        return topology, seed, run_single(config, topology, seed), None
    except Exception as exc:  # reported per seed by the caller
        return topology, seed, None, f"{type(exc).__name__}: {exc}"


def run_csv_name(topology: str, seed: int) -> str:
    return f"{topology}_seed{seed}.csv"


@dataclass
class RunOutcome:
    files: list
    summaries: list
    failures: list


def run(config: ExperimentConfig, out_dir) -> RunOutcome:
    """Run every (topology, seed), write one CSV each plus a per-topology summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tasks = [(config, t, s) for t in config.topologies for s in config.seeds]
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(_task, tasks))
    else:
        results = [_task(t) for t in tasks]
    files, failures = [], []
    by_topology = {}
    for topology, seed, records, err in results:
        if err is not None:
            failures.append((topology, seed, err))
            log.error("topology %s seed %d failed: %s", topology, seed, err)
            continue
        path = out / run_csv_name(topology, seed)
        path.write_text(records_to_csv(records))
        files.append(path)
        by_topology.setdefault(topology, []).append(records)
    summaries = []
    for topology, runs in by_topology.items():
        path = out / f"summary_{topology}.csv"
        path.write_text(summary_csv(runs))
        summaries.append(path)
    if failures:
        (out / "failures.txt").write_text(
            "".join(f"{t}\tseed={s}\t{e}\n" for t, s, e in failures))
    return RunOutcome(files, summaries, failures)


# ---------------------------------------------------------------------------
# Aggregation

SUMMARY_METRICS = ("value", "poa", "nash_gap", "dag_density", "eta", "alpha", "grad_norm")


def mean_stderr(values) -> tuple:
    """Mean and standard error ``std / sqrt(n)`` (population std)."""
    arr = np.asarray([v for v in values if v is not None], dtype=np.float64)
    if arr.size == 0:
        return None, None
    return float(arr.mean()), float(arr.std() / math.sqrt(arr.size))


def summary_csv(runs: list) -> str:
    """Per-step mean and stderr across seeds for one topology."""
    steps = sorted({r.step for recs in runs for r in recs})
    index = [{r.step: r for r in recs} for recs in runs]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = ["step", "n_seeds"]
    for m in SUMMARY_METRICS:
        header += [f"{m}_mean", f"{m}_stderr"]
    writer.writerow(header)
    for step in steps:
        rows = [idx[step] for idx in index if step in idx]
        line = [step, len(rows)]
        for m in SUMMARY_METRICS:
            mu, se = mean_stderr(getattr(r, m) for r in rows)
            line += [_fmt(mu), _fmt(se)]
        writer.writerow(line)
    return buf.getvalue()


@dataclass
class FinalSummary:
    topology: str
    n_seeds: int
    value: tuple
    poa: tuple
    nash_gap: tuple
    dag_density: tuple


def summarize(csv_dir) -> list:
    """Final-row statistics per topology from every per-run CSV in ``csv_dir``."""
    directory = Path(csv_dir)
    paths = sorted(p for p in directory.glob("*_seed*.csv")) if directory.is_dir() else []
    if not paths:
        raise FileNotFoundError(f"no run CSVs found in {csv_dir}")
    finals = {}
    for p in paths:
        recs = records_from_csv(p.read_text())
        if not recs:
            continue
        finals.setdefault(recs[-1].topology, []).append(recs[-1])
    table = []
    for topology in sorted(finals, key=lambda t: TOPOLOGIES.index(t) if t in TOPOLOGIES else 99):
        rows = finals[topology]
        table.append(FinalSummary(
            topology, len(rows),
            mean_stderr(r.value for r in rows), mean_stderr(r.poa for r in rows),
            mean_stderr(r.nash_gap for r in rows), mean_stderr(r.dag_density for r in rows)))
    return table


def final_summary_csv(table: list) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["topology", "n_seeds", "value_mean", "value_stderr", "poa_mean", "poa_stderr",
                     "nash_gap_mean", "nash_gap_stderr", "dag_density_mean", "dag_density_stderr"])
    for row in table:
        writer.writerow([row.topology, row.n_seeds,
                         *(_fmt(x) for x in (*row.value, *row.poa, *row.nash_gap, *row.dag_density))])
    return buf.getvalue()
