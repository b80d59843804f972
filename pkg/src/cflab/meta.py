"""Gradient-based meta-learning over driver tasks, plus the non-meta trainers.

The meta routines only need objects with ``support(theta)`` and
``query(theta)`` losses (see :class:`~cflab.pidl.TaskObjective`), so they work
unchanged on toy problems.  Inner steps are plain gradient steps.  Unless
``first_order`` is set, the outer gradient is taken through them exactly:
inner gradients are built with ``create_graph=True`` and differentiated
again.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from . import autodiff as ad
from .nn import AdamState, adam_step

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class Task(Protocol):
    task_id: str

    def support(self, theta): ...

    def query(self, theta): ...


@dataclass(frozen=True)
class MetaConfig:
    alpha: float = 0.01
    beta: float = 0.001
    k_inner: int = 3
    meta_batch: int = 8
    outer_steps: int = 2000
    first_order: bool = False
    clip_norm: float | None = None  # rescale the outer gradient to at most this L2 norm

    def __post_init__(self):
        # alpha = 0 is allowed: it makes adaptation the identity
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("learning rates must be non-negative")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if self.k_inner < 1 or self.meta_batch < 1 or self.outer_steps < 0:
            raise ValueError("k_inner and meta_batch must be >= 1, outer_steps >= 0")


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    wall: list = field(default_factory=list)

    def add(self, step: int, loss: float, wall: float | None):
        self.steps.append(step)
        self.losses.append(float(loss))
        self.wall.append(wall)

    def to_records(self) -> list[dict]:
        return [{"step": s, "loss": l, "wall_time": w} for s, l, w in zip(self.steps, self.losses, self.wall)]


def _check(loss, task_id) -> None:
    value = loss.data if isinstance(loss, ad.Tensor) else loss
    if not np.all(np.isfinite(value)):
        raise TrainingError(f"non-finite loss while adapting task {task_id}")


def inner_adapt(theta, task: Task, cfg: MetaConfig, differentiable: bool | None = None):
    """``k_inner`` gradient steps on the support loss starting from ``theta``.

    With a Tensor ``theta`` that requires grad, the result stays in the graph
    (exactly, or to first order when ``cfg.first_order``).  With an array it is
    a plain array.  ``k_inner`` counts every update.
    """
    if differentiable is None:
        differentiable = isinstance(theta, ad.Tensor) and theta.requires_grad
    if not differentiable:
        return fine_tune(theta, task, cfg)
    second_order = not cfg.first_order
    adapted = theta
    for _ in range(cfg.k_inner):
        if cfg.alpha == 0:
            break
        loss = task.support(adapted)
        _check(loss, task.task_id)
        try:
            (g,) = ad.grad(loss, [adapted], create_graph=second_order)
        except ad.NumericError as exc:
            raise TrainingError(f"while adapting task {task.task_id}: {exc}") from None
        adapted = adapted - cfg.alpha * g
    return adapted


def fine_tune(theta, task: Task, cfg: MetaConfig) -> np.ndarray:
    """Same steps as :func:`inner_adapt`, never differentiated through."""
    adapted = np.array(theta.data if isinstance(theta, ad.Tensor) else theta, dtype=float)
    for _ in range(cfg.k_inner):
        if cfg.alpha == 0:
            break
        try:
            loss, g = ad.value_and_grad(task.support, adapted)
        except ad.NumericError as exc:
            raise TrainingError(f"while adapting task {task.task_id}: {exc}") from None
        _check(loss, task.task_id)
        adapted = adapted - cfg.alpha * g.data
    return adapted


def meta_gradient(theta, tasks: Sequence[Task], cfg: MetaConfig):
    """Gradient of the summed post-adaptation query loss w.r.t. ``theta``.

    Returns ``(gradient, per-task query losses)``.  Tasks are processed and
    accumulated in the given order.
    """
    theta = np.asarray(theta, dtype=float)
    total = np.zeros_like(theta)
    losses = []
    for task in tasks:
        leaf = ad.Tensor(theta.copy(), requires_grad=True)
        adapted = inner_adapt(leaf, task, cfg, differentiable=True)
        q = task.query(adapted)
        _check(q, task.task_id)
        try:
            (g,) = ad.grad(q, [leaf])
        except ad.NumericError as exc:
            raise TrainingError(f"meta-gradient of task {task.task_id}: {exc}") from None
        total = total + g.data
        losses.append(float(q.data))
    return total, losses


def outer_step(theta, tasks: Sequence[Task], cfg: MetaConfig):
    """One meta-update ``theta - beta * grad sum_i L_query(adapt_i(theta))``.

    Returns ``(new_theta, summed meta-loss)``.
    """
    if not tasks:
        raise ValueError("outer_step needs at least one task")
    g, losses = meta_gradient(theta, tasks, cfg)
    if cfg.clip_norm is not None:
        norm = float(np.linalg.norm(g))
        if norm > cfg.clip_norm:
            g = g * (cfg.clip_norm / norm)
    return np.asarray(theta, dtype=float) - cfg.beta * g, float(np.sum(losses))


def meta_train(theta0, train_tasks: Sequence[Task], cfg: MetaConfig, seed: int = 0,
               on_step: Callable[[int, np.ndarray, float], None] | None = None,
               record_wall: bool = True):
    """Sample task batches (uniform, with replacement) and apply outer steps.

    Returns ``(theta, TrainLog)`` where the log holds the mean per-task meta
    loss of every step.
    """
    if not train_tasks:
        raise ValueError("meta_train needs tasks")
    rng = np.random.default_rng(seed)
    theta = np.array(theta0, dtype=float)
    trace = TrainLog()
    t0 = time.perf_counter()
    for step in range(cfg.outer_steps):
        idx = rng.integers(0, len(train_tasks), size=cfg.meta_batch)
        batch = [train_tasks[i] for i in idx]
        theta, total = outer_step(theta, batch, cfg)
        trace.add(step, total / len(batch), time.perf_counter() - t0 if record_wall else None)
        if on_step is not None:
            on_step(step, theta, total)
        if step % 100 == 0:
            log.debug("meta step %d loss %.5f", step, total / len(batch))
    return theta, trace


@dataclass(frozen=True)
class PretrainConfig:
    """Plain (non-meta) training with Adam on whole tasks."""

    steps: int = 2000
    batch: int = 8
    lr: float = 1e-3


def pretrain(theta0, train_tasks: Sequence, cfg: PretrainConfig, seed: int = 0,
             record_wall: bool = True):
    """Minimize the mean full-task loss (support and query) with Adam."""
    rng = np.random.default_rng(seed)
    theta = np.array(theta0, dtype=float)
    state = AdamState.zeros(theta.size)
    trace = TrainLog()
    t0 = time.perf_counter()
    for step in range(cfg.steps):
        idx = rng.integers(0, len(train_tasks), size=cfg.batch)
        g_sum = np.zeros_like(theta)
        loss_sum = 0.0
        for i in idx:
            task = train_tasks[i]
            loss, g = ad.value_and_grad(task.full, theta)
            _check(loss, task.task_id)
            g_sum += g.data
            loss_sum += float(loss.data)
        theta = adam_step(theta, g_sum / len(idx), cfg.lr, state)
        trace.add(step, loss_sum / len(idx), time.perf_counter() - t0 if record_wall else None)
    return theta, trace
