"""Spacing MSE, collision rate, and the seven-model benchmark harness."""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import CFEvent, DriverTask, IDMParams
from .meta import MetaConfig, fine_tune
from .physics import GHRParams
from .pidl import Learner
from .rollout import DEFAULT_WARMUP, GHRPolicy, IDMPolicy, RolloutResult, EventBatch, simulate

# display order of the full suite
SUITE_ORDER = ("GHR", "IDM", "LSTM", "LSTM+pretrain", "LSTM+meta", "PIDL+pretrain", "PIDL+meta")
LEARNED = {"LSTM", "LSTM+pretrain", "LSTM+meta", "PIDL+pretrain", "PIDL+meta"}


class BenchmarkConfigError(ValueError):
    pass


def spacing_mse(result: RolloutResult | CFEvent, observed: CFEvent, skip: int = 0) -> float:
    """Mean squared spacing error over steps ``skip`` onward.

    Pass ``skip = warmup + 1`` to drop the states a rollout copied from data.
    """
    sim = result.simulated if isinstance(result, RolloutResult) else result
    if len(sim) != len(observed):
        raise ValueError(f"length mismatch: simulated {len(sim)} vs observed {len(observed)}")
    if skip >= len(observed):
        raise ValueError("nothing left to score after skipping warmup steps")
    err = sim.spacing[skip:] - observed.spacing[skip:]
    return float(np.mean(err * err))


@dataclass(frozen=True)
class CollisionRate:
    permille: float
    count: int
    total: int


def collision_rate(results: Sequence[RolloutResult | bool]) -> CollisionRate:
    """Per-mille share of events whose simulated spacing reached zero."""
    if len(results) == 0:
        raise ValueError("collision rate of an empty set")
    flags = [r.collided if isinstance(r, RolloutResult) else bool(r) for r in results]
    count = int(sum(flags))
    return CollisionRate(1000.0 * count / len(flags), count, len(flags))


# suite -----------------------------------------------------------------------


@dataclass(frozen=True)
class SuiteEntry:
    """One benchmark row: a calibrated physics law or a learned initialization.

    ``adapt`` says whether the entry is fine-tuned on each test driver's
    support set before scoring (all learned entries are).
    """

    name: str
    params: IDMParams | GHRParams | None = None
    learner: Learner | None = None
    theta: np.ndarray | None = None
    adapt: bool = True

    def __post_init__(self):
        if self.params is None and (self.learner is None or self.theta is None):
            raise BenchmarkConfigError(f"suite entry {self.name} has no trained artifact")


@dataclass(frozen=True)
class BenchmarkConfig:
    warmup: int = DEFAULT_WARMUP
    finetune: MetaConfig = MetaConfig()
    window_stride: int = 1
    threads: int = 1


@dataclass
class ModelScore:
    mse: float
    collision: CollisionRate
    per_driver: dict = field(default_factory=dict)
    collided_events: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "mse_spacing": self.mse,
            "collision_rate_permille": self.collision.permille,
            "collision_count": self.collision.count,
            "total_events": self.collision.total,
            "per_driver": self.per_driver,
            "collided_events": self.collided_events,
        }


@dataclass
class EvalReport:
    models: dict
    fingerprint: str = ""
    version: str = ""

    def to_dict(self) -> dict:
        return {
            "fingerprint": self.fingerprint,
            "version": self.version,
            "models": {k: v.to_dict() for k, v in self.models.items()},
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def write_csv(self, path) -> None:
        write_table_csv(self.rows(), path)

    def rows(self) -> list[tuple]:
        return [(name, s.mse, s.collision.permille, s.collision.count) for name, s in self.models.items()]


def write_table_csv(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("model", "mse_spacing", "collision_rate_permille", "collision_count"))
        for name, mse, rate, count in rows:
            w.writerow((name, f"{mse:.6f}", f"{rate:.4f}", int(count)))


def _policy(entry: SuiteEntry, theta, dt: float):
    if isinstance(entry.params, IDMParams):
        return IDMPolicy(entry.params.to_array())
    if isinstance(entry.params, GHRParams):
        return GHRPolicy(entry.params.to_array(), dt)
    return entry.learner.policy(theta)


def evaluate_driver(entry: SuiteEntry, task: DriverTask, cfg: BenchmarkConfig):
    """Adapt (if applicable) then roll out every query event of one driver."""
    theta = entry.theta
    if entry.learner is not None and entry.adapt:
        theta = fine_tune(entry.theta, entry.learner.objective(task, cfg.window_stride), cfg.finetune)
    batch = EventBatch(list(task.query))
    out = simulate(batch, _policy(entry, theta, batch.dt), cfg.warmup)
    results = out.results(batch)
    mses = [spacing_mse(r, ev, cfg.warmup + 1) for r, ev in zip(results, task.query)]
    return results, mses


def run_benchmark(test_tasks: Sequence[DriverTask], suite: Sequence[SuiteEntry],
                  cfg: BenchmarkConfig = BenchmarkConfig()) -> EvalReport:
    """Score every suite entry on the query sets of the test drivers.

    Drivers may be processed on worker threads; results are always reduced
    in task order, so the report does not depend on ``cfg.threads``.
    """
    if not test_tasks:
        raise BenchmarkConfigError("no test tasks")
    models = {}
    for entry in suite:
        if cfg.threads > 1:
            with ThreadPoolExecutor(cfg.threads) as pool:
                outs = list(pool.map(lambda t: evaluate_driver(entry, t, cfg), test_tasks))
        else:
            outs = [evaluate_driver(entry, t, cfg) for t in test_tasks]
        all_mse, all_results, per_driver, collided = [], [], {}, []
        for task, (results, mses) in zip(test_tasks, outs):
            all_mse += mses
            all_results += results
            n_hit = sum(r.collided for r in results)
            per_driver[task.driver_id] = {"mse_spacing": float(np.mean(mses)), "n_events": len(mses),
                                          "collisions": int(n_hit)}
            collided += [r.simulated.event_id for r in results if r.collided]
        models[entry.name] = ModelScore(float(np.mean(all_mse)), collision_rate(all_results), per_driver, collided)
    return EvalReport(models)
