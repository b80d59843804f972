"""LSTM-driven time-varying IDM, and the plain LSTM acceleration regressor.

Both learners read the same standardized windows of (spacing, follower
speed, relative speed).  The physics-informed learner squashes six raw head
outputs into the open feasible box and feeds the resulting IDM parameters,
together with the window's last state, to the IDM law.  The plain learner
reads the acceleration straight off a one-unit head.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .core import CFEvent, DriverTask, IDMParams, KinematicState
from .nn import ParamLayout, forward_sequence, init_params
from .physics import DEFAULT_IDM_BOX, FeasibleBox, DomainError
from .rollout import History

N_FEATURES = 3
DEFAULT_WINDOW = 10
DEFAULT_HIDDEN = 32
# textbook IDM values, used as the starting point of the parameter head
IDM_PRIOR = IDMParams(a0=1.0, b=1.5, v_des=30.0, t_des=1.5, s0=2.0, lam=4.0)
KINDS = ("pidl", "lstm")


@dataclass(frozen=True)
class FeatureScaler:
    mean: tuple
    std: tuple

    def __post_init__(self):
        object.__setattr__(self, "mean", tuple(float(x) for x in self.mean))
        object.__setattr__(self, "std", tuple(float(x) for x in self.std))
        if len(self.mean) != N_FEATURES or len(self.std) != N_FEATURES:
            raise ValueError("scaler needs one mean and std per feature")
        if min(self.std) <= 0:
            raise ValueError("feature std must be positive")

    @classmethod
    def fit(cls, events: Sequence[CFEvent]) -> "FeatureScaler":
        feats = np.concatenate([e.features for e in events])
        std = feats.std(axis=0)
        if np.any(std <= 0):
            raise ValueError("a feature is constant over the fitting data")
        return cls(feats.mean(axis=0), std)

    @classmethod
    def identity(cls) -> "FeatureScaler":
        return cls((0.0,) * N_FEATURES, (1.0,) * N_FEATURES)

    def transform(self, feats) -> np.ndarray:
        return (np.asarray(feats, dtype=float) - np.array(self.mean)) / np.array(self.std)

    def to_dict(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureScaler":
        return cls(d["mean"], d["std"])


@dataclass(frozen=True)
class PidlOutput:
    params: IDMParams
    accel: float


@dataclass(frozen=True)
class Windows:
    """Teacher-forced training windows.

    ``x`` is ``(B, W, 3)`` standardized input, ``last`` is ``(B, 3)`` raw
    (spacing, v_fv, dv) at each window's final step, ``target`` the observed
    acceleration there.
    """

    x: np.ndarray
    last: np.ndarray
    target: np.ndarray

    def __len__(self):
        return len(self.target)


def make_windows(events: Sequence[CFEvent], window: int, scaler: FeatureScaler, stride: int = 1) -> Windows:
    """All sliding windows (every ``stride``-th end step) across ``events``."""
    xs, lasts, ys = [], [], []
    for e in events:
        if len(e) <= window:
            raise ValueError(f"event {e.event_id} has {len(e)} steps; window needs more than {window}")
        feats = e.features
        ends = np.arange(window - 1, len(e), stride)
        view = np.lib.stride_tricks.sliding_window_view(feats, window, axis=0)  # (n-W+1, 3, W)
        xs.append(scaler.transform(view[ends - window + 1].transpose(0, 2, 1)))
        lasts.append(feats[ends])
        ys.append(e.a_fv[ends])
    return Windows(np.concatenate(xs), np.concatenate(lasts), np.concatenate(ys))


def box_params(raw, box: FeasibleBox):
    """Map unbounded raw outputs into the open box with a scaled logistic."""
    return box.lo + box.width * ad.sigmoid(raw)


def box_logit(values, box: FeasibleBox) -> np.ndarray:
    """Inverse of :func:`box_params` for points strictly inside the box."""
    u = (np.asarray(values, dtype=float) - box.lo) / box.width
    return np.log(u) - np.log1p(-u)


def idm_accel_diff(last, P):
    """IDM written with differentiable ops; ``P`` is ``(B, 6)`` (array or Tensor)."""
    s, v, dv = last[:, 0], last[:, 1], last[:, 2]
    a0, b, v_des, t_des, s0, lam = (P[:, k] for k in range(6))
    desired_gap = s0 + v * t_des + 0.5 * (v * dv) / ad.sqrt(a0 * b)
    moving = v > 0
    log_v = np.log(np.where(moving, v, 1.0))
    speed_term = ad.exp(lam * (log_v - ad.log(v_des))) * moving.astype(float)
    gap_ratio = desired_gap * (1.0 / s)
    return a0 * (1.0 - speed_term - gap_ratio * gap_ratio)


@dataclass(frozen=True)
class Learner:
    """A network architecture plus everything needed to turn it into accelerations."""

    kind: str
    layout: ParamLayout
    scaler: FeatureScaler
    box: FeasibleBox = DEFAULT_IDM_BOX
    window: int = DEFAULT_WINDOW

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown learner kind {self.kind!r}")
        want = 6 if self.kind == "pidl" else 1
        if self.layout.output_size != want or self.layout.input_size != N_FEATURES:
            raise ValueError(f"{self.kind} learner needs layout ({N_FEATURES} -> {want})")
        if self.kind == "pidl" and not self.box.is_proper:
            raise ValueError("the parameter box must have positive width in every dimension")

    @classmethod
    def create(cls, kind: str, scaler: FeatureScaler, hidden: int = DEFAULT_HIDDEN,
               box: FeasibleBox = DEFAULT_IDM_BOX, window: int = DEFAULT_WINDOW) -> "Learner":
        out = 6 if kind == "pidl" else 1
        return cls(kind, ParamLayout(N_FEATURES, hidden, out), scaler, box, window)

    def init_theta(self, rng: np.random.Generator, prior: IDMParams | None = None) -> np.ndarray:
        """Standard LSTM initialization.

        For the physics-informed learner a ``prior`` sets the head bias to the
        logit of those parameters, so the untrained network already emits a
        plausible IDM instead of the box midpoint.
        """
        theta = init_params(self.layout, rng).values.copy()
        if self.kind == "pidl" and prior is not None:
            theta[self.layout.slice("b_head")] = box_logit(prior.to_array(), self.box)
        return theta

    def emitted_params(self, x, theta):
        raw = forward_sequence(x, theta, self.layout)
        return box_params(raw, self.box)

    def predict(self, x, last, theta):
        """Acceleration for each window; Tensor in, Tensor out."""
        if self.kind == "lstm":
            return forward_sequence(x, theta, self.layout)[:, 0]
        if np.any(last[:, 0] <= 0):
            raise DomainError("PIDL needs positive spacing at the last window step")
        return idm_accel_diff(last, self.emitted_params(x, theta))

    def loss(self, w: Windows, theta):
        err = self.predict(w.x, w.last, theta) - w.target
        return (err * err).mean() if isinstance(err, ad.Tensor) else float(np.mean(err * err))

    def objective(self, task: DriverTask, stride: int = 1) -> "TaskObjective":
        return TaskObjective(
            task.driver_id,
            self,
            make_windows(task.support, self.window, self.scaler, stride),
            make_windows(task.query, self.window, self.scaler, stride),
        )

    def policy(self, theta) -> "LearnedPolicy":
        return LearnedPolicy(self, np.asarray(theta, dtype=float))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "hidden": self.layout.hidden_size,
            "window": self.window,
            "scaler": self.scaler.to_dict(),
            "box": self.box.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Learner":
        from .core import IDM_FIELDS

        return cls.create(d["kind"], FeatureScaler.from_dict(d["scaler"]), int(d["hidden"]),
                          FeasibleBox.from_dict(d["box"], IDM_FIELDS), int(d["window"]))


@dataclass(frozen=True)
class TaskObjective:
    """Support and query losses of one driver under one learner."""

    task_id: str
    learner: Learner
    support_windows: Windows
    query_windows: Windows

    def support(self, theta):
        return self.learner.loss(self.support_windows, theta)

    def query(self, theta):
        return self.learner.loss(self.query_windows, theta)

    def full(self, theta):
        n_s, n_q = len(self.support_windows), len(self.query_windows)
        return (self.support(theta) * n_s + self.query(theta) * n_q) * (1.0 / (n_s + n_q))


class LearnedPolicy:
    """Closed-loop policy: re-run the network over the last ``window`` simulated states."""

    def __init__(self, learner: Learner, theta: np.ndarray):
        self.learner = learner
        self.theta = theta

    def __call__(self, hist: History, t: int) -> np.ndarray:
        lo = max(0, t - self.learner.window + 1)
        idx = (slice(None), slice(lo, t + 1))
        feats = np.stack([hist.policy_spacing(idx), hist.v_fv[idx], hist.dv[idx]], axis=-1)
        x = self.learner.scaler.transform(feats)
        return self.learner.predict(x, feats[:, -1, :], self.theta)


# single-window entry points ----------------------------------------------------


def _window_array(window) -> np.ndarray:
    if len(window) and isinstance(window[0], KinematicState):
        return np.array([[s.spacing, s.v_fv, s.dv] for s in window], dtype=float)
    return np.asarray(window, dtype=float)


def pidl_forward(window, theta, scaler: FeatureScaler, box: FeasibleBox = DEFAULT_IDM_BOX,
                 layout: ParamLayout | None = None) -> PidlOutput:
    """Emitted IDM parameters and acceleration for one window of states."""
    feats = _window_array(window)
    if layout is None:
        layout = _infer_layout(np.size(theta), 6)
    learner = Learner("pidl", layout, scaler, box, len(feats))
    x = scaler.transform(feats)[None]
    with ad.no_record():
        theta_arr = theta.data if isinstance(theta, ad.Tensor) else np.asarray(theta, dtype=float)
        P = learner.emitted_params(x, theta_arr)
        accel = learner.predict(x, feats[None, -1], theta_arr)
    return PidlOutput(IDMParams.from_array(P[0]), float(accel[0]))


def pidl_loss(events: Sequence[CFEvent], theta, scaler: FeatureScaler, box: FeasibleBox = DEFAULT_IDM_BOX,
              layout: ParamLayout | None = None, window: int = DEFAULT_WINDOW, stride: int = 1):
    """Mean squared acceleration error over all sliding windows of ``events``."""
    if layout is None:
        layout = _infer_layout(np.size(theta), 6)
    learner = Learner("pidl", layout, scaler, box, window)
    return learner.loss(make_windows(events, window, scaler, stride), theta)


def _infer_layout(n_params: int, out: int) -> ParamLayout:
    # total = 4(h*d + h*h + h) + out*h + out with d = 3
    for h in range(1, 1025):
        if 4 * (h * N_FEATURES + h * h + h) + out * h + out == n_params:
            return ParamLayout(N_FEATURES, h, out)
    raise ValueError(f"no LSTM layout has {n_params} parameters")
