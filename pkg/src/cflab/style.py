"""Driving-style analysis: threshold binning, the 75-mode library, gamma fits.

Acceleration and relative speed are cut into five bins each and spacing
into three, giving 5 x 5 x 3 = 75 modes.  Intervals are closed on the left
and open on the right.  Mode probabilities are normalized within each gap
category, so every populated 5 x 5 block sums to one.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import digamma, polygamma

from .core import CFEvent, KinematicState

N_ACCEL, N_RELSPEED, N_GAP = 5, 5, 3
N_MODES = N_ACCEL * N_RELSPEED * N_GAP

ACCEL_LABELS = (
    "Aggressive positive deceleration",
    "Gentle negative deceleration",
    "Keeping acceleration",
    "Gentle positive acceleration",
    "Aggressive positive acceleration",
)
RELSPEED_LABELS = (
    "Aggressive negative relative speed",
    "Gentle negative relative speed",
    "Keeping relative speed",
    "Gentle positive relative speed",
    "Aggressive positive relative speed",
)
GAP_LABELS = ("Close gap", "Normal gap", "Long gap")
NO_DATA = "no data"


class StyleError(ValueError):
    pass


def _ascending(edges, n: int, name: str) -> tuple:
    edges = tuple(float(x) for x in edges)
    if len(edges) != n:
        raise StyleError(f"{name} needs {n} edges, got {len(edges)}")
    if any(b <= a for a, b in zip(edges, edges[1:])):
        raise StyleError(f"{name} must be strictly ascending")
    return edges


@dataclass(frozen=True)
class ThresholdTable:
    accel_edges: tuple = (-0.39, -0.08, 0.16, 0.46)
    relspeed_edges: tuple = (-0.82, -0.21, 0.28, 0.89)
    spacing_edges: tuple = (10.11, 24.70)

    def __post_init__(self):
        object.__setattr__(self, "accel_edges", _ascending(self.accel_edges, N_ACCEL - 1, "accel_edges"))
        object.__setattr__(self, "relspeed_edges", _ascending(self.relspeed_edges, N_RELSPEED - 1, "relspeed_edges"))
        object.__setattr__(self, "spacing_edges", _ascending(self.spacing_edges, N_GAP - 1, "spacing_edges"))

    def to_dict(self) -> dict:
        return {"accel_edges": list(self.accel_edges), "relspeed_edges": list(self.relspeed_edges),
                "spacing_edges": list(self.spacing_edges)}

    @classmethod
    def from_dict(cls, d: dict) -> "ThresholdTable":
        return cls(d["accel_edges"], d["relspeed_edges"], d["spacing_edges"])


DEFAULT_THRESHOLDS = ThresholdTable()


@dataclass(frozen=True)
class ModeBin:
    accel_bin: int
    relspeed_bin: int
    gap_bin: int

    @property
    def mode_id(self) -> int:
        return mode_id(self.gap_bin, self.relspeed_bin, self.accel_bin)


def mode_id(gap_bin, relspeed_bin, accel_bin):
    return gap_bin * 25 + relspeed_bin * 5 + accel_bin


def _digitize(x, edges) -> np.ndarray:
    # side="right" puts a value equal to an edge in the bin that starts there
    return np.searchsorted(np.asarray(edges), np.asarray(x, dtype=float), side="right")


def bin_arrays(spacing, dv, accel, table: ThresholdTable = DEFAULT_THRESHOLDS):
    """Vectorized binning; returns ``(accel_bin, relspeed_bin, gap_bin, mode_id)`` arrays.

    The relative-speed feature is ``dv = v_fv - v_lv``.
    """
    acc = _digitize(accel, table.accel_edges)
    rs = _digitize(dv, table.relspeed_edges)
    gap = _digitize(spacing, table.spacing_edges)
    return acc, rs, gap, mode_id(gap, rs, acc)


def bin_state(state: KinematicState, table: ThresholdTable = DEFAULT_THRESHOLDS) -> tuple[int, int, int, int]:
    acc, rs, gap, mid = bin_arrays(state.spacing, state.dv, state.a_fv, table)
    return int(acc), int(rs), int(gap), int(mid)


# gamma fitting ---------------------------------------------------------------


@dataclass(frozen=True)
class GammaFit:
    shape: float
    scale: float
    converged: bool
    n: int

    def to_dict(self) -> dict:
        return {"shape": self.shape, "scale": self.scale, "converged": self.converged, "n": self.n}


def gamma_moments(x) -> tuple[float, float]:
    """Method-of-moments shape and scale using the sample (n-1) variance."""
    x = np.asarray(x, dtype=float)
    mean, var = float(x.mean()), float(x.var(ddof=1))
    return mean * mean / var, var / mean


def fit_gamma(samples, tol: float = 1e-12, max_iter: int = 100) -> GammaFit:
    """Maximum-likelihood gamma fit.

    Starts from the moment estimate and solves
    ``log k - digamma(k) = log(mean) - mean(log x)`` by Newton's method on
    ``log k``.  If that fails to converge the moment estimate is returned
    with ``converged=False``.
    """
    x = np.asarray(samples, dtype=float).ravel()
    if x.size < 10:
        raise StyleError("gamma fit needs at least 10 samples")
    if not np.all(np.isfinite(x)) or np.any(x <= 0):
        raise StyleError("gamma fit needs finite positive samples")
    if np.ptp(x) == 0:
        raise StyleError("gamma fit needs samples with nonzero variance")
    k_mom, scale_mom = gamma_moments(x)
    mean = float(x.mean())
    target = np.log(mean) - float(np.mean(np.log(x)))
    u = np.log(k_mom)
    for _ in range(max_iter):
        k = np.exp(u)
        f = np.log(k) - digamma(k) - target
        # derivative with respect to u = log k
        df = (1.0 / k - polygamma(1, k)) * k
        step = f / df
        u -= step
        if not np.isfinite(u):
            break
        if abs(step) < tol:
            k = float(np.exp(u))
            return GammaFit(k, mean / k, True, x.size)
    return GammaFit(k_mom, scale_mom, False, x.size)


def feature_gamma_fits(events: Sequence[CFEvent]) -> dict:
    """Gamma fits for spacing, and for acceleration and relative-speed magnitudes by sign."""
    spacing = np.concatenate([e.spacing for e in events])
    accel = np.concatenate([e.a_fv for e in events])
    dv = np.concatenate([e.dv for e in events])
    out = {"spacing": _try_fit(spacing[spacing > 0])}
    for name, x in (("accel", accel), ("relspeed", dv)):
        out[f"{name}_positive"] = _try_fit(x[x > 0])
        out[f"{name}_negative"] = _try_fit(-x[x < 0])
    return out


def _try_fit(x):
    try:
        return fit_gamma(x).to_dict()
    except StyleError as exc:
        return {"error": str(exc), "n": int(np.size(x))}


# mode matrices ---------------------------------------------------------------


@dataclass
class ModeMatrix:
    """Per gap category, a (relative speed x acceleration) probability matrix."""

    probs: np.ndarray  # (3, 5, 5)
    counts: np.ndarray  # (3, 5, 5) integer

    @property
    def gap_totals(self) -> np.ndarray:
        return self.counts.sum(axis=(1, 2))

    @classmethod
    def from_counts(cls, counts) -> "ModeMatrix":
        counts = np.asarray(counts, dtype=np.int64).reshape(N_GAP, N_RELSPEED, N_ACCEL)
        totals = counts.sum(axis=(1, 2), keepdims=True)
        probs = np.divide(counts, totals, out=np.zeros(counts.shape), where=totals > 0)
        return cls(probs, counts)

    def to_dict(self) -> dict:
        return {
            "row_axis": "relspeed_bin",
            "col_axis": "accel_bin",
            "gap_categories": [
                {"gap_bin": g, "label": GAP_LABELS[g], "samples": int(self.gap_totals[g]),
                 "probs": self.probs[g].tolist(), "counts": self.counts[g].tolist()}
                for g in range(N_GAP)
            ],
        }


def mode_counts(events: Sequence[CFEvent], table: ThresholdTable = DEFAULT_THRESHOLDS) -> np.ndarray:
    """Timestep counts per mode id, length 75; counts from shards add up."""
    counts = np.zeros(N_MODES, dtype=np.int64)
    for e in events:
        *_, mids = bin_arrays(e.spacing, e.dv, e.a_fv, table)
        counts += np.bincount(mids, minlength=N_MODES)
    return counts


def mode_matrices(events: Sequence[CFEvent], table: ThresholdTable = DEFAULT_THRESHOLDS) -> ModeMatrix:
    if not events:
        raise StyleError("mode matrices need at least one event")
    return ModeMatrix.from_counts(mode_counts(events, table))


@dataclass(frozen=True)
class RepresentativeMode:
    gap_bin: int
    relspeed_bin: int | None
    accel_bin: int | None
    mode_id: int | None
    probability: float | None

    @property
    def has_data(self) -> bool:
        return self.mode_id is not None

    def to_dict(self) -> dict:
        if not self.has_data:
            return {"gap_bin": self.gap_bin, "gap_label": GAP_LABELS[self.gap_bin], "mode": NO_DATA}
        return {
            "gap_bin": self.gap_bin,
            "gap_label": GAP_LABELS[self.gap_bin],
            "relspeed_bin": self.relspeed_bin,
            "accel_bin": self.accel_bin,
            "mode_id": self.mode_id,
            "probability": self.probability,
            "relspeed_label": RELSPEED_LABELS[self.relspeed_bin],
            "accel_label": ACCEL_LABELS[self.accel_bin],
        }


def representative_modes(m: ModeMatrix) -> list[RepresentativeMode]:
    """Most likely cell per gap category; ties go to the smaller mode id."""
    out = []
    for g in range(N_GAP):
        if m.gap_totals[g] == 0:
            out.append(RepresentativeMode(g, None, None, None, None))
            continue
        # row-major argmax returns the first maximum, i.e. the smallest mode id
        flat = int(np.argmax(m.probs[g].ravel()))
        rs, acc = divmod(flat, N_ACCEL)
        out.append(RepresentativeMode(g, rs, acc, mode_id(g, rs, acc), float(m.probs[g, rs, acc])))
    return out


# threshold derivation --------------------------------------------------------


@dataclass(frozen=True)
class QuantileScheme:
    five_bin: tuple = (0.2, 0.4, 0.6, 0.8)
    three_bin: tuple = (1 / 3, 2 / 3)
    min_samples: int = 1000


def derive_thresholds_from_arrays(spacing, dv, accel, scheme: QuantileScheme = QuantileScheme()) -> ThresholdTable:
    n = min(np.size(spacing), np.size(dv), np.size(accel))
    if n < scheme.min_samples:
        raise StyleError(f"threshold derivation needs at least {scheme.min_samples} timesteps, got {n}")
    return ThresholdTable(
        np.quantile(accel, scheme.five_bin),
        np.quantile(dv, scheme.five_bin),
        np.quantile(spacing, scheme.three_bin),
    )


def derive_thresholds(events: Sequence[CFEvent], scheme: QuantileScheme = QuantileScheme()) -> ThresholdTable:
    """Empirical-quantile edges: quintiles for acceleration and relative speed, terciles for spacing."""
    if not events:
        raise StyleError("threshold derivation needs events")
    return derive_thresholds_from_arrays(
        np.concatenate([e.spacing for e in events]),
        np.concatenate([e.dv for e in events]),
        np.concatenate([e.a_fv for e in events]),
        scheme,
    )


# output ----------------------------------------------------------------------


def write_mode_csv(m: ModeMatrix, path) -> None:
    """Three 5 x 5 blocks, each under its own header row."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for g in range(N_GAP):
            w.writerow([f"gap_bin={g}", f"samples={int(m.gap_totals[g])}"] + [""] * (N_ACCEL - 1))
            w.writerow(["relspeed_bin\\accel_bin"] + [str(a) for a in range(N_ACCEL)])
            for r in range(N_RELSPEED):
                w.writerow([str(r)] + [repr(float(p)) for p in m.probs[g, r]])


def style_report(events: Sequence[CFEvent], table: ThresholdTable = DEFAULT_THRESHOLDS,
                 derive: bool = False) -> dict:
    """Everything the ``style`` command writes, as one JSON-ready dict."""
    m = mode_matrices(events, table)
    out = {
        "thresholds": table.to_dict(),
        "mode_matrices": m.to_dict(),
        "representative_modes": [r.to_dict() for r in representative_modes(m)],
        "gamma_fits": feature_gamma_fits(events),
    }
    if derive:
        out["derived_thresholds"] = derive_thresholds(events).to_dict()
    return out


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
