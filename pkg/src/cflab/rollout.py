"""Closed-loop simulation of a follower behind a replayed leader.

The leader's trajectory comes from data; the follower is driven by an
acceleration policy and integrated with the ballistic update

    v(t+dt) = v + a dt,    x(t+dt) = x + v dt + a dt^2 / 2,

where ``a`` is first raised to ``-v/dt`` if needed so speed never goes
negative inside a step.  Many events are simulated together as the lanes of
one :class:`EventBatch`; lanes shorter than the batch simply stop early.

A policy is any callable ``policy(hist, t) -> ndarray`` returning one
acceleration per lane, where ``hist`` is the :class:`History` filled up to
and including step ``t``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import CFEvent
from .physics import ghr_accel_array, idm_accel_array, delay_steps

COLLISION_FLOOR = -0.01
# gap handed to policies once a lane has collided, so the laws stay defined
POLICY_MIN_GAP = 0.01
DEFAULT_WARMUP = 10


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class RolloutResult:
    simulated: CFEvent
    collided: bool
    collision_index: int | None


@dataclass
class History:
    """Simulated follower states so far, shape ``(lanes, steps)``."""

    spacing: np.ndarray
    v_fv: np.ndarray
    dv: np.ndarray
    a_fv: np.ndarray
    dt: float

    def policy_spacing(self, idx) -> np.ndarray:
        return np.maximum(self.spacing[idx], POLICY_MIN_GAP)


class EventBatch:
    """Events padded to a common length for lane-parallel simulation."""

    def __init__(self, events: Sequence[CFEvent]):
        if not events:
            raise ValueError("empty batch")
        dts = {e.dt for e in events}
        if len(dts) != 1:
            raise ValueError("all events in a batch must share dt")
        self.events = list(events)
        self.dt = dts.pop()
        self.lengths = np.array([len(e) for e in events])
        n = int(self.lengths.max())
        self.n_steps = n

        def pad(col):
            out = np.empty((len(events), n))
            for i, e in enumerate(events):
                x = getattr(e, col)
                out[i, : len(x)] = x
                out[i, len(x):] = x[-1]
            return out

        self.spacing = pad("spacing")
        self.v_fv = pad("v_fv")
        self.v_lv = pad("v_lv")
        self.a_fv = pad("a_fv")
        # leader displacement is exact under the ballistic update
        steps = 0.5 * (self.v_lv[:, 1:] + self.v_lv[:, :-1]) * self.dt
        self.x_lv = self.spacing[:, :1] + np.concatenate(
            [np.zeros((len(events), 1)), np.cumsum(steps, axis=1)], axis=1)

    def __len__(self):
        return len(self.events)

    def tile(self, k: int) -> "EventBatch":
        """Repeat the whole batch ``k`` times (candidate-major lane order)."""
        out = object.__new__(EventBatch)
        out.events = self.events * k
        out.dt = self.dt
        out.n_steps = self.n_steps
        out.lengths = np.tile(self.lengths, k)
        for name in ("spacing", "v_fv", "v_lv", "a_fv", "x_lv"):
            setattr(out, name, np.tile(getattr(self, name), (k, 1)))
        return out


@dataclass
class SimOutput:
    spacing: np.ndarray
    v_fv: np.ndarray
    a_fv: np.ndarray
    lengths: np.ndarray
    collided: np.ndarray
    collision_index: np.ndarray  # -1 where no collision
    invalid: np.ndarray  # lanes whose policy produced a non-finite value (non-strict mode)

    def results(self, batch: EventBatch) -> list[RolloutResult]:
        out = []
        for i, ev in enumerate(batch.events):
            n = int(self.lengths[i])
            sim = ev.replace(spacing=self.spacing[i, :n], v_fv=self.v_fv[i, :n], a_fv=self.a_fv[i, :n])
            ci = int(self.collision_index[i])
            out.append(RolloutResult(sim, bool(self.collided[i]), ci if ci >= 0 else None))
        return out


def simulate(batch: EventBatch, policy: Callable, warmup: int = DEFAULT_WARMUP, strict: bool = True) -> SimOutput:
    """Run ``policy`` closed-loop on every lane of ``batch``.

    A non-finite acceleration raises :class:`SimulationError` naming the
    step.  With ``strict=False`` the lane is instead marked invalid and
    frozen, which lets calibration discard diverging candidates.
    """
    if warmup < 0 or np.any(warmup >= batch.lengths):
        raise ValueError("warmup must be shorter than every event")
    lanes, n, dt = len(batch), batch.n_steps, batch.dt
    hist = History(np.zeros((lanes, n)), np.zeros((lanes, n)), np.zeros((lanes, n)),
                   np.zeros((lanes, n)), dt)
    w1 = warmup + 1
    hist.spacing[:, :w1] = batch.spacing[:, :w1]
    hist.v_fv[:, :w1] = batch.v_fv[:, :w1]
    hist.dv[:, :w1] = batch.v_fv[:, :w1] - batch.v_lv[:, :w1]
    hist.a_fv[:, :w1] = batch.a_fv[:, :w1]
    x_fv = batch.x_lv[:, warmup] - batch.spacing[:, warmup]
    gap = batch.spacing[:, warmup].copy()
    collided = np.zeros(lanes, dtype=bool)
    cidx = np.full(lanes, -1)
    invalid = np.zeros(lanes, dtype=bool)
    for t in range(w1):
        hit = (batch.spacing[:, t] <= 0) & ~collided
        cidx[hit] = t
        collided |= hit

    for t in range(warmup, n):
        active = t < batch.lengths
        with np.errstate(all="ignore"):
            a = np.asarray(policy(hist, t), dtype=float)
        if a.shape != (lanes,):
            a = np.broadcast_to(a, (lanes,)).astype(float)
        bad = active & ~np.isfinite(a)
        if bad.any():
            if strict:
                raise SimulationError(f"non-finite acceleration at step {t} (lane {int(np.flatnonzero(bad)[0])})")
            invalid |= bad
        active = active & ~invalid
        a = np.where(invalid, 0.0, a)
        v = hist.v_fv[:, t]
        a = np.maximum(a, -v / dt)
        hist.a_fv[:, t] = np.where(active, a, hist.a_fv[:, t])
        if t == n - 1:
            break
        step = active & (t + 1 < batch.lengths)
        v_new = np.maximum(v + a * dt, 0.0)
        x_fv = np.where(step, x_fv + v * dt + 0.5 * a * dt * dt, x_fv)
        gap = np.where(step, batch.x_lv[:, t + 1] - x_fv, gap)
        hit = step & (gap <= 0) & ~collided
        cidx[hit] = t + 1
        collided |= hit
        hist.v_fv[:, t + 1] = np.where(step, v_new, v)
        hist.spacing[:, t + 1] = np.maximum(gap, COLLISION_FLOOR)
        hist.dv[:, t + 1] = hist.v_fv[:, t + 1] - batch.v_lv[:, t + 1]
    return SimOutput(hist.spacing, hist.v_fv, hist.a_fv, batch.lengths, collided, cidx, invalid)


def rollout(event: CFEvent, model: Callable, warmup: int = DEFAULT_WARMUP) -> RolloutResult:
    """Simulate one event; see :func:`simulate`."""
    batch = EventBatch([event])
    return simulate(batch, model, warmup).results(batch)[0]


def rollout_many(events: Sequence[CFEvent], model: Callable, warmup: int = DEFAULT_WARMUP) -> list[RolloutResult]:
    batch = EventBatch(events)
    return simulate(batch, model, warmup).results(batch)


# policies --------------------------------------------------------------------


class ConstantPolicy:
    def __init__(self, accel: float):
        self.accel = float(accel)

    def __call__(self, hist: History, t: int) -> np.ndarray:
        return np.full(hist.spacing.shape[0], self.accel)


class ReplayPolicy:
    """Apply the recorded follower accelerations of the batch's events."""

    def __init__(self, batch: EventBatch):
        self.a = batch.a_fv

    def __call__(self, hist: History, t: int) -> np.ndarray:
        return self.a[:, t]


class IDMPolicy:
    """IDM with one parameter row per lane, or one row for all lanes."""

    def __init__(self, params):
        self.params = np.atleast_2d(np.asarray(params, dtype=float))

    def __call__(self, hist: History, t: int) -> np.ndarray:
        s = hist.policy_spacing((slice(None), t))
        return idm_accel_array(s, hist.v_fv[:, t], hist.dv[:, t], self.params)


class GHRPolicy:
    """GHR with per-lane parameters.

    Early in a rollout the delayed index can fall before the first state; it
    is clamped to step 0 there.
    """

    def __init__(self, params, dt: float):
        self.params = np.atleast_2d(np.asarray(params, dtype=float))
        self.lag = delay_steps(self.params[:, 3], dt)

    def __call__(self, hist: History, t: int) -> np.ndarray:
        lanes = hist.spacing.shape[0]
        j = np.maximum(t - np.broadcast_to(self.lag, (lanes,)), 0)
        rows = np.arange(lanes)
        s = np.maximum(hist.spacing[rows, j], POLICY_MIN_GAP)
        return ghr_accel_array(hist.v_fv[:, t], hist.dv[rows, j], s, self.params)
