"""End-to-end experiment: fleet, splits, baselines, training, benchmark.

This is the library form of the ranking experiment; the CLI subcommands
expose the same stages one artifact at a time.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .data import FleetConfig, SplitSpec, extract_events, generate_fleet, make_tasks
from .evaluation import BenchmarkConfig, EvalReport, SuiteEntry, run_benchmark
from .ga import GAConfig, calibrate
from .meta import MetaConfig, PretrainConfig, meta_train, pretrain
from .physics import DEFAULT_GHR_BOX, DEFAULT_IDM_BOX, FeasibleBox
from .pidl import DEFAULT_WINDOW, IDM_PRIOR, KINDS, FeatureScaler, Learner

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExperimentConfig:
    """Desk-scale settings for the seven-model comparison.

    ``finetune`` is the adaptation budget every learned model gets on each
    test driver; meta-training uses the same ``alpha`` and ``k_inner`` so
    the meta-learned initialization is trained for exactly that budget.
    """

    n_drivers: int = 44
    events_per_driver: int = 25
    fleet_seed: int = 0
    fleet: FleetConfig = FleetConfig()
    split: SplitSpec = SplitSpec()
    hidden: int = 16
    window: int = DEFAULT_WINDOW
    window_stride: int = 20
    ga: GAConfig = GAConfig(population=60, generations=60)
    ga_events_per_driver: int = 2
    pretrain: PretrainConfig = PretrainConfig(steps=1000, batch=4, lr=1e-3)
    meta: MetaConfig = MetaConfig(alpha=0.1, beta=0.005, k_inner=10, meta_batch=4, outer_steps=60, clip_norm=1.0)
    warm_start_meta: bool = True
    warmup: int = 10
    idm_box: FeasibleBox = DEFAULT_IDM_BOX
    ghr_box: FeasibleBox = DEFAULT_GHR_BOX

    @property
    def finetune(self) -> MetaConfig:
        return replace(self.meta, outer_steps=0)


@dataclass
class ExperimentResult:
    report: EvalReport
    timings: dict = field(default_factory=dict)
    suite: list = field(default_factory=list)
    logs: dict = field(default_factory=dict)


def prepare_tasks(cfg: ExperimentConfig, seed: int):
    fleet = generate_fleet(cfg.n_drivers, cfg.events_per_driver, profiles_seed=cfg.fleet_seed, config=cfg.fleet)
    events, _, _ = extract_events(fleet.events)
    train, test = make_tasks(events, replace(cfg.split, seed=seed))
    return fleet, train, test


def calibration_events(train_tasks, per_driver: int):
    """First ``per_driver`` support events of every training driver."""
    return [e for t in train_tasks for e in t.support[:per_driver]]


def train_learner(kind: str, train_tasks, scaler, cfg: ExperimentConfig, seed: int):
    """Return ``(learner, pretrained theta, meta theta, logs)``."""
    learner = Learner.create(kind, scaler, cfg.hidden, cfg.idm_box, cfg.window)
    theta0 = learner.init_theta(np.random.default_rng([seed, KINDS.index(kind)]), IDM_PRIOR)
    objectives = [learner.objective(t, cfg.window_stride) for t in train_tasks]
    theta_pre, pre_log = pretrain(theta0, objectives, cfg.pretrain, seed=seed, record_wall=False)
    start = theta_pre if cfg.warm_start_meta else theta0
    theta_meta, meta_log = meta_train(start, objectives, cfg.meta, seed=seed, record_wall=False)
    return learner, theta0, theta_pre, theta_meta, {"pretrain": pre_log, "meta": meta_log}


def run_experiment(cfg: ExperimentConfig = ExperimentConfig(), seed: int = 0) -> ExperimentResult:
    timings = {}
    t0 = time.perf_counter()
    _, train, test = prepare_tasks(cfg, seed)
    scaler = FeatureScaler.fit([e for t in train for e in t.events])
    timings["data"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    cal = calibration_events(train, cfg.ga_events_per_driver)
    ga_cfg = replace(cfg.ga, seed=seed)
    idm = calibrate("IDM", cal, cfg.idm_box, ga_cfg, cfg.warmup)
    ghr = calibrate("GHR", cal, cfg.ghr_box, ga_cfg, cfg.warmup)
    timings["calibrate"] = time.perf_counter() - t0

    logs = {}
    trained = {}
    for kind in ("lstm", "pidl"):
        t0 = time.perf_counter()
        trained[kind] = train_learner(kind, train, scaler, cfg, seed)
        logs[kind] = trained[kind][4]
        timings[f"train_{kind}"] = time.perf_counter() - t0

    lstm, lstm0, lstm_pre, lstm_meta, _ = trained["lstm"]
    pidl, _, pidl_pre, pidl_meta, _ = trained["pidl"]
    suite = [
        SuiteEntry("GHR", params=ghr.params),
        SuiteEntry("IDM", params=idm.params),
        SuiteEntry("LSTM", learner=lstm, theta=lstm0),
        SuiteEntry("LSTM+pretrain", learner=lstm, theta=lstm_pre),
        SuiteEntry("LSTM+meta", learner=lstm, theta=lstm_meta),
        SuiteEntry("PIDL+pretrain", learner=pidl, theta=pidl_pre),
        SuiteEntry("PIDL+meta", learner=pidl, theta=pidl_meta),
    ]
    t0 = time.perf_counter()
    bench = BenchmarkConfig(cfg.warmup, cfg.finetune, cfg.window_stride)
    report = run_benchmark(test, suite, bench)
    timings["benchmark"] = time.perf_counter() - t0
    return ExperimentResult(report, timings, suite, logs)
