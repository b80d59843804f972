"""Synthetic driver fleets, event extraction, driver/task splits and CSV I/O.

Fleet drivers are IDM followers whose parameters wander over time as a
mean-reverting random walk around a per-driver base (reflected at the box
walls), plus white acceleration noise.  Base parameters come from a few
style clusters so that drivers genuinely differ.  Followers are integrated
with :func:`cflab.rollout.simulate`, the same integrator used for
evaluation.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import DEFAULT_DT, CFEvent, DriverTask, IDMParams
from .physics import DEFAULT_IDM_BOX, FeasibleBox, equilibrium_spacing, idm_accel_array
from .rollout import EventBatch, History, simulate

CSV_HEADER = ("driver_id", "event_id", "lv_id", "t", "spacing_m", "v_fv_mps", "v_lv_mps", "a_fv_mps2", "lateral_m")

# base IDM parameters (a0, b, v_des, t_des, s0, lam) of each style cluster
STYLES = {
    "aggressive": (2.0, 2.5, 33.0, 0.8, 1.5, 4.0),
    "moderate": (1.3, 1.8, 30.0, 1.3, 2.5, 4.0),
    "cautious": (0.8, 1.2, 27.0, 2.0, 3.5, 4.0),
}


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticDriverProfile:
    driver_id: str
    style: str
    base: IDMParams
    drift_rates: tuple  # mean reversion per parameter, 1/s
    drift_vol: tuple  # volatility per parameter, fraction of base per sqrt(s)
    accel_noise_sigma: float
    seed: int

    def to_dict(self) -> dict:
        d = asdict(self)
        d["base"] = self.base.to_dict()
        d["drift_rates"] = list(self.drift_rates)
        d["drift_vol"] = list(self.drift_vol)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticDriverProfile":
        d = dict(d)
        d["base"] = IDMParams.from_dict(d["base"])
        d["drift_rates"] = tuple(d["drift_rates"])
        d["drift_vol"] = tuple(d["drift_vol"])
        return cls(**d)


@dataclass(frozen=True)
class FleetConfig:
    dt: float = DEFAULT_DT
    duration: tuple = (18.0, 30.0)  # event length range, s
    accel_noise_sigma: float = 0.1
    drift_rate: float = 0.2
    # per-parameter volatility (fraction of base per sqrt(s)); v_des and lam do not drift
    drift_vol: tuple = (0.06, 0.06, 0.0, 0.06, 0.06, 0.0)
    style_jitter: float = 0.12
    styles: tuple = tuple(STYLES)
    box: FeasibleBox = DEFAULT_IDM_BOX
    max_leader_speed: float = 24.0


@dataclass
class Fleet:
    events: list
    profiles: dict = field(default_factory=dict)

    def truth_json(self) -> str:
        return json.dumps({k: p.to_dict() for k, p in sorted(self.profiles.items())}, indent=2, sort_keys=True) + "\n"


def driver_rng(fleet_seed: int, driver_index: int) -> np.random.Generator:
    """Independent stream per driver, derived by hashing the pair."""
    return np.random.default_rng(np.random.SeedSequence([int(fleet_seed), int(driver_index)]))


def draw_profile(driver_id: str, rng: np.random.Generator, cfg: FleetConfig, seed: int,
                 style: str | None = None) -> SyntheticDriverProfile:
    style = style or str(rng.choice(cfg.styles))
    base = np.array(STYLES[style]) * np.exp(cfg.style_jitter * rng.standard_normal(6))
    base[5] = STYLES[style][5]
    base = np.clip(base, cfg.box.lo * 1.05, cfg.box.hi * 0.95)
    return SyntheticDriverProfile(
        driver_id, style, IDMParams.from_array(base),
        (cfg.drift_rate,) * 6, tuple(cfg.drift_vol), cfg.accel_noise_sigma, seed,
    )


def _reflect(x, lo, hi):
    x = np.where(x < lo, 2 * lo - x, x)
    x = np.where(x > hi, 2 * hi - x, x)
    return np.clip(x, lo, hi)


def parameter_path(profile: SyntheticDriverProfile, n: int, dt: float, rng: np.random.Generator,
                   box: FeasibleBox, lanes: int = 1) -> np.ndarray:
    """Mean-reverting walk of the six IDM parameters, ``(lanes, n, 6)``."""
    base = profile.base.to_array()
    kappa = np.array(profile.drift_rates)
    vol = np.array(profile.drift_vol) * base
    shocks = rng.standard_normal((n, lanes, 6)) * (vol * math.sqrt(dt))
    out = np.empty((lanes, n, 6))
    p = np.tile(base, (lanes, 1))
    for t in range(n):
        out[:, t] = p
        p = _reflect(p + kappa * (base - p) * dt + shocks[t], box.lo, box.hi)
    return out


def leader_speed(n: int, dt: float, rng: np.random.Generator, v_max: float) -> np.ndarray:
    """Piecewise constant-acceleration leader with occasional hard braking."""
    v = np.empty(n)
    v[0] = rng.uniform(1.0, v_max - 4.0)
    t = 0
    while t < n - 1:
        seg = int(rng.uniform(1.5, 5.0) / dt)
        u = rng.random()
        if u < 0.12:
            acc = -rng.uniform(2.0, 3.5)
            seg = int(rng.uniform(0.8, 2.0) / dt)
        elif u < 0.35:
            acc = 0.0
        else:
            acc = rng.uniform(-1.2, 1.2)
        for _ in range(seg):
            if t >= n - 1:
                break
            a = min(max(acc, -v[t] / dt), (v_max - v[t]) / dt)
            v[t + 1] = v[t] + a * dt
            t += 1
    return np.maximum(v, 0.0)


class _DriftingIDM:
    """Generator policy: per-step IDM parameters plus additive noise."""

    def __init__(self, params: np.ndarray, noise: np.ndarray):
        self.params, self.noise = params, noise  # (lanes, n, 6), (lanes, n)

    def __call__(self, hist: History, t: int) -> np.ndarray:
        s = hist.policy_spacing((slice(None), t))
        a = idm_accel_array(s, hist.v_fv[:, t], hist.dv[:, t], self.params[:, t])
        return a + self.noise[:, t]


def _lateral(n: int, rng: np.random.Generator) -> np.ndarray:
    walk = np.cumsum(rng.normal(0, 0.02, n))
    return np.clip(0.3 * rng.standard_normal() + walk, -1.5, 1.5)


def generate_driver(profile: SyntheticDriverProfile, n_events: int, cfg: FleetConfig,
                    rng: np.random.Generator) -> list[CFEvent]:
    """Simulate ``n_events`` collision-free events for one driver.

    Candidates are simulated together; any that collide or come closer
    than 0.5 m are redrawn.
    """
    dt = cfg.dt
    events: list[CFEvent] = []
    for _ in range(50):
        want = n_events - len(events)
        if want == 0:
            break
        lo, hi = cfg.duration
        lengths = [int(round(rng.uniform(lo, hi) / dt)) + 1 for _ in range(want)]
        n = max(lengths)
        params = parameter_path(profile, n, dt, rng, cfg.box, lanes=want)
        noise = profile.accel_noise_sigma * rng.standard_normal((want, n))
        seeds = []
        for k, m in enumerate(lengths):
            v_lv = leader_speed(m, dt, rng, cfg.max_leader_speed)
            p0 = IDMParams.from_array(params[k, 0])
            v0 = float(np.clip(v_lv[0] + rng.normal(0, 1.0), 0.0, 0.9 * p0.v_des))
            s0 = equilibrium_spacing(v0, p0) * rng.uniform(0.85, 1.3)
            # only the initial follower state matters to the simulator
            seeds.append(CFEvent(profile.driver_id, "tmp", "tmp", dt, np.full(m, s0), np.full(m, v0),
                                 v_lv, np.zeros(m)))
        batch = EventBatch(seeds)
        out = simulate(batch, _DriftingIDM(params, noise), warmup=0)
        for k, m in enumerate(lengths):
            if out.collided[k] or out.spacing[k, :m].min() < 0.5:
                continue
            j = len(events) + 1
            events.append(CFEvent(
                profile.driver_id, f"{profile.driver_id}-E{j:03d}", f"{profile.driver_id}-LV{j:03d}", dt,
                out.spacing[k, :m], out.v_fv[k, :m], seeds[k].v_lv, out.a_fv[k, :m], lateral=_lateral(m, rng),
            ))
    if len(events) < n_events:
        raise RuntimeError(f"could not generate collision-free events for {profile.driver_id}")
    return events


def generate_fleet(n_drivers: int, events_per_driver: int, horizon: tuple | float | None = None,
                   profiles_seed: int = 0, config: FleetConfig = FleetConfig(),
                   styles: Sequence[str] | None = None) -> Fleet:
    """Synthetic heterogeneous fleet with labelled ground-truth profiles.

    ``horizon`` is the event duration (seconds) or a ``(min, max)`` range and
    overrides ``config.duration``.  ``styles`` pins each driver's style.
    """
    if n_drivers < 1:
        raise ValueError("need at least one driver")
    if horizon is not None:
        rng_ = (float(horizon), float(horizon)) if np.isscalar(horizon) else tuple(horizon)
        config = dataclasses.replace(config, duration=rng_)
    fleet = Fleet([])
    width = max(2, len(str(n_drivers)))
    for i in range(n_drivers):
        rng = driver_rng(profiles_seed, i)
        did = f"D{i + 1:0{width}d}"
        style = styles[i] if styles is not None else None
        profile = draw_profile(did, rng, config, seed=int(profiles_seed), style=style)
        fleet.profiles[did] = profile
        fleet.events.extend(generate_driver(profile, events_per_driver, config, rng))
    return fleet


# extraction ------------------------------------------------------------------


@dataclass(frozen=True)
class ExtractionCriteria:
    max_lateral: float = 2.5
    min_duration: float = 15.0
    min_events_per_driver: int = 20
    require_constant_lv: bool = True

    def __post_init__(self):
        if self.max_lateral <= 0 or self.min_duration <= 0 or self.min_events_per_driver <= 0:
            raise ValueError("extraction thresholds must be positive")


@dataclass(frozen=True)
class Rejection:
    driver_id: str
    event_id: str
    reason: str


# durations are (n-1)*dt in floating point; 150 * 0.1 must count as 15 s exactly
_DURATION_EPS = 1e-9


def event_rejection(event: CFEvent, c: ExtractionCriteria) -> str | None:
    if c.require_constant_lv and event.lv_ids is not None and len(set(event.lv_ids)) > 1:
        return "lead-vehicle-changed"
    if event.lateral is not None and np.max(np.abs(event.lateral)) >= c.max_lateral:
        return "lateral-offset"
    if not event.duration > c.min_duration + _DURATION_EPS:
        return "too-short"
    if np.any(event.spacing <= 0) or not np.all(np.isfinite(event.spacing)):
        return "non-positive-spacing"
    return None


def extract_events(raw: Iterable[CFEvent], criteria: ExtractionCriteria = ExtractionCriteria()):
    """Filter events, then drop drivers left with too few.

    Returns ``(accepted, counts, rejections)`` where ``counts`` maps each
    surviving driver to its number of accepted events.
    """
    rejections: list[Rejection] = []
    by_driver: dict[str, list[CFEvent]] = {}
    for ev in raw:
        reason = event_rejection(ev, criteria)
        if reason is None:
            by_driver.setdefault(ev.driver_id, []).append(ev)
        else:
            rejections.append(Rejection(ev.driver_id, ev.event_id, reason))
    accepted, counts = [], {}
    for did, evs in by_driver.items():
        if len(evs) < criteria.min_events_per_driver:
            rejections += [Rejection(did, e.event_id, "driver-below-min-events") for e in evs]
            continue
        accepted += evs
        counts[did] = len(evs)
    return accepted, counts, rejections


# splits ----------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    n_train_drivers: int = 33
    n_test_drivers: int = 11
    support_fraction: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.support_fraction < 1:
            raise ValueError("support_fraction must lie in (0, 1)")
        if self.n_train_drivers < 1 or self.n_test_drivers < 0:
            raise ValueError("driver counts must be positive")


def split_events(events: Sequence[CFEvent], fraction: float, rng: np.random.Generator):
    order = rng.permutation(len(events))
    n_sup = int(math.floor(len(events) * fraction + 1e-9))
    sup = [events[i] for i in order[:n_sup]]
    qry = [events[i] for i in order[n_sup:]]
    return sup, qry


def make_tasks(events: Sequence[CFEvent], split: SplitSpec = SplitSpec()):
    """Partition drivers into train/test and each driver's events into support/query."""
    by_driver: dict[str, list[CFEvent]] = {}
    for e in events:
        by_driver.setdefault(e.driver_id, []).append(e)
    drivers = sorted(by_driver)
    need = split.n_train_drivers + split.n_test_drivers
    if len(drivers) < need:
        raise SplitError(f"need {need} drivers, found {len(drivers)}")
    rng = np.random.default_rng(split.seed)
    chosen = [drivers[i] for i in rng.permutation(len(drivers))[:need]]
    tasks = []
    for did in chosen:
        evs = sorted(by_driver[did], key=lambda e: e.event_id)
        sup, qry = split_events(evs, split.support_fraction, rng)
        if not sup or not qry:
            raise SplitError(f"driver {did} has too few events ({len(evs)}) for a support/query split")
        tasks.append(DriverTask(did, sup, qry))
    return tasks[: split.n_train_drivers], tasks[split.n_train_drivers:]


def task_manifest(train: Sequence[DriverTask], test: Sequence[DriverTask]) -> dict:
    def entry(t, role):
        return {"role": role, "support": [e.event_id for e in t.support], "query": [e.event_id for e in t.query]}

    out = {t.driver_id: entry(t, "train") for t in train}
    out.update({t.driver_id: entry(t, "test") for t in test})
    return out


def tasks_from_manifest(manifest: dict, events: Sequence[CFEvent]):
    index = {(e.driver_id, e.event_id): e for e in events}
    train, test = [], []
    for did in manifest:
        m = manifest[did]
        try:
            task = DriverTask(did, [index[(did, x)] for x in m["support"]], [index[(did, x)] for x in m["query"]])
        except KeyError as exc:
            raise SplitError(f"manifest references unknown event {exc.args[0]}") from None
        (train if m["role"] == "train" else test).append(task)
    return train, test


# CSV -------------------------------------------------------------------------


def write_events_csv(events: Iterable[CFEvent], path) -> None:
    """One row per timestep; floats written with ``repr`` so reading back is exact."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for e in events:
            lat = e.lateral
            for i in range(len(e)):
                lv = e.lv_ids[i] if e.lv_ids is not None else e.lv_id
                w.writerow((
                    e.driver_id, e.event_id, lv, repr(round(i * e.dt, 9)),
                    repr(float(e.spacing[i])), repr(float(e.v_fv[i])), repr(float(e.v_lv[i])),
                    repr(float(e.a_fv[i])), "" if lat is None else repr(float(lat[i])),
                ))


class CSVFormatError(ValueError):
    pass


def read_events_csv(path) -> list[CFEvent]:
    """Parse the trajectory CSV; rows are grouped by (driver_id, event_id)."""
    groups: dict[tuple, list] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CSV_HEADER:
            raise CSVFormatError(f"{path}: header must be {','.join(CSV_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(CSV_HEADER):
                raise CSVFormatError(f"{path}:{lineno}: expected {len(CSV_HEADER)} fields")
            try:
                nums = [float(x) for x in row[3:8]]
                lat = float(row[8]) if row[8] != "" else None
            except ValueError:
                raise CSVFormatError(f"{path}:{lineno}: malformed number") from None
            groups.setdefault((row[0], row[1]), []).append((row[2], nums, lat))
    events = []
    for (did, eid), rows in groups.items():
        t = np.array([r[1][0] for r in rows])
        if len(t) > 1 and np.any(np.diff(t) <= 0):
            raise CSVFormatError(f"{path}: event {eid} timestamps are not ascending")
        dt = float(np.round(np.median(np.diff(t)), 9)) if len(t) > 1 else DEFAULT_DT
        cols = np.array([r[1][1:] for r in rows])
        lvs = [r[0] for r in rows]
        lats = [r[2] for r in rows]
        lateral = None if all(x is None for x in lats) else np.array([np.nan if x is None else x for x in lats])
        lv_ids = None if len(set(lvs)) == 1 else tuple(lvs)
        events.append(CFEvent(did, eid, lvs[0], dt, cols[:, 0], cols[:, 1], cols[:, 2], cols[:, 3],
                              lateral=lateral, lv_ids=lv_ids))
    return events


def read_truth(path) -> dict:
    d = json.loads(Path(path).read_text())
    d = d.get("drivers", d)  # CLI output wraps profiles next to a provenance block
    return {k: SyntheticDriverProfile.from_dict(v) for k, v in d.items()}
