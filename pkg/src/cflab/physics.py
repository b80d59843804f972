"""Closed-form car-following laws: IDM and GHR.

Scalar entry points (:func:`idm_acceleration`, :func:`ghr_acceleration`)
check their preconditions.  The ``*_array`` variants are the vectorized
kernels used by simulation and calibration; they assume the caller has
already guarded the domain.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import IDM_FIELDS, CFEvent, IDMParams, KinematicState


class DomainError(ValueError):
    """Inputs outside the domain where a model is defined."""


GHR_FIELDS = ("c", "m_exp", "l_exp", "tau")
MIN_GHR_GAIN = 1e-6


@dataclass(frozen=True)
class GHRParams:
    c: float
    m_exp: float
    l_exp: float
    tau: float

    def to_array(self) -> np.ndarray:
        return np.array([self.c, self.m_exp, self.l_exp, self.tau], dtype=float)

    @classmethod
    def from_array(cls, arr) -> "GHRParams":
        return cls(*(float(x) for x in arr))

    def to_dict(self) -> dict:
        return {k: float(getattr(self, k)) for k in GHR_FIELDS}

    @classmethod
    def from_dict(cls, d: dict) -> "GHRParams":
        return cls(**{k: float(d[k]) for k in GHR_FIELDS})


@dataclass(frozen=True)
class FeasibleBox:
    """Per-parameter bounds.  ``names`` fixes the coordinate order."""

    names: tuple
    lower: tuple
    upper: tuple

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "lower", tuple(float(x) for x in self.lower))
        object.__setattr__(self, "upper", tuple(float(x) for x in self.upper))
        if not (len(self.names) == len(self.lower) == len(self.upper)):
            raise ValueError("names, lower and upper must have equal length")
        for n, lo, hi in zip(self.names, self.lower, self.upper):
            if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
                raise ValueError(f"bad bounds for {n}: [{lo}, {hi}]")
        if self.names == IDM_FIELDS and min(self.lower) <= 0:
            raise ValueError("IDM lower bounds must be positive")

    @property
    def lo(self) -> np.ndarray:
        return np.array(self.lower)

    @property
    def hi(self) -> np.ndarray:
        return np.array(self.upper)

    @property
    def width(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def is_proper(self) -> bool:
        """Strictly positive width in every dimension."""
        return bool(np.all(self.hi > self.lo))

    @property
    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def contains(self, x, open_: bool = False) -> bool:
        x = np.asarray(x, dtype=float)
        if open_:
            return bool(np.all((x > self.lo) & (x < self.hi)))
        return bool(np.all((x >= self.lo) & (x <= self.hi)))

    def clip(self, x) -> np.ndarray:
        return np.clip(x, self.lo, self.hi)

    def to_dict(self) -> dict:
        return {n: [lo, hi] for n, lo, hi in zip(self.names, self.lower, self.upper)}

    @classmethod
    def from_dict(cls, d: dict, names: Sequence[str]) -> "FeasibleBox":
        return cls(tuple(names), tuple(d[n][0] for n in names), tuple(d[n][1] for n in names))


def idm_box(**overrides) -> FeasibleBox:
    bounds = {
        "a0": (0.1, 5.0),
        "b": (0.1, 5.0),
        "v_des": (1.0, 42.0),
        "t_des": (0.1, 5.0),
        "s0": (0.1, 10.0),
        "lam": (1.0, 10.0),
    }
    bounds.update(overrides)
    return FeasibleBox(IDM_FIELDS, [bounds[k][0] for k in IDM_FIELDS], [bounds[k][1] for k in IDM_FIELDS])


def ghr_box(**overrides) -> FeasibleBox:
    bounds = {"c": (-5.0, 5.0), "m_exp": (-2.0, 2.0), "l_exp": (0.0, 4.0), "tau": (0.0, 2.0)}
    bounds.update(overrides)
    return FeasibleBox(GHR_FIELDS, [bounds[k][0] for k in GHR_FIELDS], [bounds[k][1] for k in GHR_FIELDS])


DEFAULT_IDM_BOX = idm_box()
DEFAULT_GHR_BOX = ghr_box()


# IDM -------------------------------------------------------------------------


def idm_accel_array(spacing, v, dv, params) -> np.ndarray:
    """Vectorized IDM.  ``params`` is ``(..., 6)`` in :data:`IDM_FIELDS` order."""
    p = np.asarray(params, dtype=float)
    a0, b, v_des, t_des, s0, lam = (p[..., k] for k in range(6))
    desired_gap = s0 + v * t_des + v * dv / (2.0 * np.sqrt(a0 * b))
    return a0 * (1.0 - (v / v_des) ** lam - (desired_gap / spacing) ** 2)


def idm_acceleration(state: KinematicState, p: IDMParams, box: FeasibleBox = DEFAULT_IDM_BOX) -> float:
    """IDM acceleration for one state.  Raises :class:`DomainError` off-domain."""
    if not state.spacing > 0:
        raise DomainError(f"IDM needs positive spacing, got {state.spacing}")
    arr = p.to_array()
    if box is not None and not box.contains(arr):
        raise DomainError(f"IDM parameters outside the feasible box: {p}")
    a = float(idm_accel_array(state.spacing, state.v_fv, state.dv, arr))
    if not math.isfinite(a):
        raise DomainError("IDM acceleration is not finite")
    return a


def equilibrium_spacing(v: float, p: IDMParams) -> float:
    """Gap at which a follower at steady speed ``v < v_des`` has zero acceleration."""
    if not 0 <= v < p.v_des:
        raise DomainError("equilibrium needs 0 <= v < v_des")
    return (p.s0 + v * p.t_des) / math.sqrt(1.0 - (v / p.v_des) ** p.lam)


# GHR -------------------------------------------------------------------------


def delay_steps(tau, dt: float):
    """Quantize a reaction delay to whole steps; exact halves round down."""
    x = np.asarray(tau, dtype=float) / dt
    steps = np.ceil(x - 0.5 - 1e-9).astype(int)
    return np.maximum(steps, 0)


def ghr_accel_array(v_now, dv_delayed, spacing_delayed, params) -> np.ndarray:
    """Vectorized GHR: ``c * v^m * (-dv(t - tau)) / S(t - tau)^l``.

    ``params`` is ``(..., 4)`` in :data:`GHR_FIELDS` order; ``tau`` is
    ignored here because the caller supplies already-delayed inputs.
    """
    p = np.asarray(params, dtype=float)
    c, m, l_exp = p[..., 0], p[..., 1], p[..., 2]
    # a negative speed exponent would blow up at standstill
    v_eff = np.where(m < 0, np.maximum(v_now, 0.1), v_now)
    return c * v_eff ** m * (-dv_delayed) / spacing_delayed ** l_exp


def ghr_acceleration(history: CFEvent | Sequence[KinematicState], t_index: int, p: GHRParams,
                     dt: float | None = None) -> float:
    """GHR acceleration at ``t_index`` using states ``round(tau/dt)`` steps back."""
    if isinstance(history, CFEvent):
        dt = history.dt if dt is None else dt
        states = history
    else:
        states = list(history)
    if dt is None:
        raise ValueError("dt is required when history is a plain sequence")
    if not 0 <= t_index < len(states):
        raise DomainError(f"t_index {t_index} outside history of length {len(states)}")
    lag = int(delay_steps(p.tau, dt))
    j = t_index - lag
    if j < 0:
        raise DomainError(f"delay of {lag} steps needs history before t_index {t_index}")
    now, past = states[t_index], states[j]
    if not past.spacing > 0:
        raise DomainError(f"GHR needs positive delayed spacing, got {past.spacing}")
    return float(ghr_accel_array(now.v_fv, past.dv, past.spacing, p.to_array()))


# JSON ------------------------------------------------------------------------


def params_to_json(p: IDMParams | GHRParams, path) -> None:
    Path(path).write_text(json.dumps(p.to_dict(), indent=2, sort_keys=True) + "\n")


def params_from_json(path) -> IDMParams | GHRParams:
    d = json.loads(Path(path).read_text())
    return GHRParams.from_dict(d) if "c" in d else IDMParams.from_dict(d)
