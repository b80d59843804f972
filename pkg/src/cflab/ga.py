"""Real-coded genetic algorithm for IDM / GHR calibration.

Fitness of a candidate is its mean closed-loop spacing MSE over the
calibration events.  A whole generation is simulated at once: lanes are
(candidate, event) pairs of one tiled :class:`~cflab.rollout.EventBatch`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import IDMParams
from .physics import MIN_GHR_GAIN, FeasibleBox, GHRParams
from .rollout import DEFAULT_WARMUP, EventBatch, GHRPolicy, IDMPolicy, simulate

MODEL_KINDS = ("IDM", "GHR")


class CalibrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class GAConfig:
    population: int = 100
    generations: int = 200
    crossover_rate: float = 0.9
    mutation_rate: float = 0.1
    mutation_sigma: float = 0.1
    tournament_size: int = 3
    elitism: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.population < 2:
            raise ValueError("population must be at least 2")
        for name in ("crossover_rate", "mutation_rate"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not 0 <= self.elitism < self.population:
            raise ValueError("elitism must be smaller than the population")
        if self.tournament_size < 1 or self.generations < 0:
            raise ValueError("tournament_size >= 1 and generations >= 0 required")


@dataclass
class CalibrationResult:
    kind: str
    params: IDMParams | GHRParams
    fitness: float
    history: list = field(default_factory=list)  # best-so-far fitness per generation

    def to_dict(self, box: FeasibleBox, cfg: GAConfig) -> dict:
        return {
            "model_kind": self.kind,
            "box": box.to_dict(),
            "config": cfg.__dict__.copy(),
            "best_params": self.params.to_dict(),
            "best_fitness": self.fitness,
            "fitness_history": list(self.history),
        }


def _decode(kind: str, genes: np.ndarray) -> np.ndarray:
    if kind == "GHR":
        genes = genes.copy()
        c = genes[..., 0]
        # |c| below the floor would switch the model off
        genes[..., 0] = np.where(np.abs(c) < MIN_GHR_GAIN, np.where(c < 0, -MIN_GHR_GAIN, MIN_GHR_GAIN), c)
    return genes


class _Fitness:
    def __init__(self, kind: str, events, warmup: int):
        self.kind = kind
        self.base = EventBatch(list(events))
        self.n_events = len(self.base)
        self.warmup = warmup
        self._tiled = {}

    def __call__(self, pop: np.ndarray) -> np.ndarray:
        k = len(pop)
        if k not in self._tiled:
            self._tiled[k] = self.base.tile(k)
        batch = self._tiled[k]
        params = np.repeat(_decode(self.kind, pop), self.n_events, axis=0)
        policy = IDMPolicy(params) if self.kind == "IDM" else GHRPolicy(params, batch.dt)
        with np.errstate(all="ignore"):
            out = simulate(batch, policy, self.warmup, strict=False)
            per_lane = lane_spacing_mse(out.spacing, batch.spacing, batch.lengths, self.warmup + 1)
        per_lane[out.invalid] = np.inf
        fit = per_lane.reshape(k, self.n_events).mean(axis=1)
        return np.where(np.isfinite(fit), fit, np.inf)


def lane_spacing_mse(sim: np.ndarray, obs: np.ndarray, lengths: np.ndarray, skip: int) -> np.ndarray:
    """Per-lane MSE over steps ``skip .. length-1`` of padded arrays."""
    idx = np.arange(sim.shape[1])
    mask = (idx[None, :] >= skip) & (idx[None, :] < lengths[:, None])
    err = np.where(mask, sim - obs, 0.0)
    return (err * err).sum(axis=1) / mask.sum(axis=1)


def _tournament(fit: np.ndarray, size: int, rng: np.random.Generator) -> int:
    entrants = rng.integers(0, len(fit), size=size)
    return int(entrants[np.argmin(fit[entrants])])


def calibrate(model_kind: str, events: Sequence, box: FeasibleBox, cfg: GAConfig = GAConfig(),
              warmup: int = DEFAULT_WARMUP) -> CalibrationResult:
    """Search ``box`` for the parameter set with the lowest mean spacing MSE.

    Returns the best candidate ever seen and the best-so-far fitness after
    the initial population and after each generation.
    """
    kind = model_kind.upper()
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {model_kind!r}")
    if not events:
        raise ValueError("calibration needs at least one event")
    rng = np.random.default_rng(cfg.seed)
    lo, hi = box.lo, box.hi
    width = hi - lo
    fitness = _Fitness(kind, events, warmup)

    pop = lo + width * rng.random((cfg.population, len(lo)))
    fit = fitness(pop)
    if not np.isfinite(fit).any():
        raise CalibrationError("every candidate in the initial population has non-finite fitness")
    best_i = int(np.argmin(fit))
    best, best_fit = pop[best_i].copy(), float(fit[best_i])
    history = [best_fit]

    for _ in range(cfg.generations):
        order = np.argsort(fit, kind="stable")
        children = [pop[i].copy() for i in order[: cfg.elitism]]
        while len(children) < cfg.population:
            p1 = pop[_tournament(fit, cfg.tournament_size, rng)]
            p2 = pop[_tournament(fit, cfg.tournament_size, rng)]
            if rng.random() < cfg.crossover_rate:
                take = rng.random(len(lo)) < 0.5
                child = np.where(take, p1, p2)
            else:
                child = p1.copy()
            mutate = rng.random(len(lo)) < cfg.mutation_rate
            child = child + mutate * rng.normal(0.0, 1.0, len(lo)) * cfg.mutation_sigma * width
            children.append(np.clip(child, lo, hi))
        pop = np.array(children)
        fit = fitness(pop)
        if not np.isfinite(fit).any():
            raise CalibrationError("every candidate has non-finite fitness")
        i = int(np.argmin(fit))
        if fit[i] < best_fit:
            best, best_fit = pop[i].copy(), float(fit[i])
        history.append(best_fit)

    genes = _decode(kind, best)
    params = IDMParams.from_array(genes) if kind == "IDM" else GHRParams.from_array(genes)
    return CalibrationResult(kind, params, best_fit, history)
