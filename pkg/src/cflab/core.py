"""Domain containers: kinematic states, car-following events, driver tasks.

Units are SI throughout.  Relative speed follows ``dv = v_fv - v_lv``, so a
positive value means the follower is closing in on its leader.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Iterable, Sequence

import numpy as np

DEFAULT_DT = 0.1


@dataclass(frozen=True)
class KinematicState:
    spacing: float
    v_fv: float
    dv: float
    a_fv: float

    @property
    def v_lv(self) -> float:
        return self.v_fv - self.dv


def _frozen(a, name: str) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class CFEvent:
    """A follower/leader pair sampled every ``dt`` seconds.

    Stored column-wise.  The leader speed is kept as recorded and ``dv`` is
    derived from it, so writing and re-reading a CSV is lossless.
    ``lateral`` and ``lv_ids`` are per-step extras that only extraction uses.
    """

    driver_id: str
    event_id: str
    lv_id: str
    dt: float
    spacing: np.ndarray
    v_fv: np.ndarray
    v_lv: np.ndarray
    a_fv: np.ndarray
    lateral: np.ndarray | None = None
    lv_ids: tuple | None = field(default=None, repr=False)

    def __post_init__(self):
        for name in ("spacing", "v_fv", "v_lv", "a_fv"):
            object.__setattr__(self, name, _frozen(getattr(self, name), name))
        n = len(self.spacing)
        if not (len(self.v_fv) == len(self.v_lv) == len(self.a_fv) == n):
            raise ValueError("state columns must have equal length")
        if self.lateral is not None:
            lat = _frozen(self.lateral, "lateral")
            if len(lat) != n:
                raise ValueError("lateral offsets must have one value per state")
            object.__setattr__(self, "lateral", lat)
        if self.lv_ids is not None:
            ids = tuple(str(x) for x in self.lv_ids)
            if len(ids) != n:
                raise ValueError("lv_ids must have one value per state")
            object.__setattr__(self, "lv_ids", ids)
        object.__setattr__(self, "dt", float(self.dt))

    @classmethod
    def from_states(cls, states: Sequence[KinematicState], *, driver_id="d0", event_id="e0",
                    lv_id="lv0", dt: float = DEFAULT_DT, **extra) -> "CFEvent":
        s = np.array([st.spacing for st in states], dtype=float)
        v = np.array([st.v_fv for st in states], dtype=float)
        dv = np.array([st.dv for st in states], dtype=float)
        a = np.array([st.a_fv for st in states], dtype=float)
        return cls(driver_id, event_id, lv_id, dt, s, v, v - dv, a, **extra)

    def __len__(self) -> int:
        return len(self.spacing)

    def __getitem__(self, i: int) -> KinematicState:
        return KinematicState(float(self.spacing[i]), float(self.v_fv[i]),
                              float(self.dv[i]), float(self.a_fv[i]))

    @property
    def dv(self) -> np.ndarray:
        return self.v_fv - self.v_lv

    @property
    def states(self) -> tuple[KinematicState, ...]:
        return tuple(self[i] for i in range(len(self)))

    @property
    def duration(self) -> float:
        return (len(self) - 1) * self.dt

    @property
    def features(self) -> np.ndarray:
        """``(n, 3)`` array of spacing, follower speed and relative speed."""
        return np.stack([self.spacing, self.v_fv, self.dv], axis=1)

    def replace(self, **changes) -> "CFEvent":
        kw = {f.name: getattr(self, f.name) for f in fields(self)}
        kw.update(changes)
        return CFEvent(**kw)

    def equals(self, other: "CFEvent") -> bool:
        """Field-wise equality, arrays compared exactly."""
        for f in fields(self):
            a, b = getattr(self, f.name), getattr(other, f.name)
            if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
                if a is None or b is None or not np.array_equal(a, b):
                    return False
            elif a != b:
                return False
        return True


@dataclass(frozen=True)
class DriverTask:
    """One driver's events split into an adaptation set and an evaluation set."""

    driver_id: str
    support: tuple
    query: tuple

    def __post_init__(self):
        object.__setattr__(self, "support", tuple(self.support))
        object.__setattr__(self, "query", tuple(self.query))
        if not self.support or not self.query:
            raise ValueError(f"task {self.driver_id}: support and query must be non-empty")
        overlap = {e.event_id for e in self.support} & {e.event_id for e in self.query}
        if overlap:
            raise ValueError(f"task {self.driver_id}: events in both sets: {sorted(overlap)}")

    @property
    def events(self) -> tuple:
        return self.support + self.query


IDM_FIELDS = ("a0", "b", "v_des", "t_des", "s0", "lam")


@dataclass(frozen=True)
class IDMParams:
    a0: float
    b: float
    v_des: float
    t_des: float
    s0: float
    lam: float

    def to_array(self) -> np.ndarray:
        return np.array([getattr(self, k) for k in IDM_FIELDS], dtype=float)

    @classmethod
    def from_array(cls, arr: Iterable[float]) -> "IDMParams":
        return cls(*(float(x) for x in arr))

    def to_dict(self) -> dict:
        d = {k: float(getattr(self, k)) for k in IDM_FIELDS}
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "IDMParams":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        return cls(**{k: float(d[k]) for k in IDM_FIELDS})


# validation ------------------------------------------------------------------


@dataclass(frozen=True)
class ValidationConfig:
    min_length: int = 2
    require_positive_spacing: bool = True


@dataclass(frozen=True)
class Violation:
    code: str
    index: int | None = None

    def __str__(self) -> str:
        return self.code if self.index is None else f"{self.code} at index {self.index}"


def validate_event(event: CFEvent, config: ValidationConfig = ValidationConfig()) -> list[Violation]:
    """Every invariant breach in ``event``; an empty list means valid."""
    out: list[Violation] = []
    if len(event) < config.min_length:
        out.append(Violation("too-short"))
    if not (np.isfinite(event.dt) and event.dt > 0):
        out.append(Violation("non-positive-dt"))
    cols = np.stack([event.spacing, event.v_fv, event.v_lv, event.a_fv])
    bad = ~np.isfinite(cols).all(axis=0)
    out += [Violation("non-finite", int(i)) for i in np.flatnonzero(bad)]
    with np.errstate(invalid="ignore"):
        out += [Violation("negative-speed", int(i)) for i in np.flatnonzero(event.v_fv < 0)]
        out += [Violation("negative-leader-speed", int(i)) for i in np.flatnonzero(event.v_lv < 0)]
        if config.require_positive_spacing:
            out += [Violation("negative-spacing", int(i)) for i in np.flatnonzero(event.spacing < 0)]
            out += [Violation("zero-spacing", int(i)) for i in np.flatnonzero(event.spacing == 0)]
    return out
