"""Layered run configuration: built-in defaults, then a config file, then flags.

The file format is one ``key = value`` per line with dotted section keys::

    # comments start with '#'
    seed = 7
    meta.alpha = 0.1
    box.t_des = 0.1, 5

Every key is typed by its default.  Tuples are written comma-separated.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

from .core import IDM_FIELDS
from .data import ExtractionCriteria, FleetConfig, SplitSpec
from .ga import GAConfig
from .meta import MetaConfig, PretrainConfig
from .physics import DEFAULT_IDM_BOX, GHR_FIELDS, DEFAULT_GHR_BOX, FeasibleBox
from .pipeline import ExperimentConfig
from .style import ThresholdTable

__version__ = "0.1.0"


class ConfigError(ValueError):
    pass


def _box_defaults(prefix: str, box: FeasibleBox) -> dict:
    return {f"{prefix}.{n}": (float(lo), float(hi)) for n, lo, hi in zip(box.names, box.lo, box.hi)}


_EXP = ExperimentConfig()

DEFAULTS: dict = {
    "seed": 0,
    "fleet.drivers": _EXP.n_drivers,
    "fleet.events": _EXP.events_per_driver,
    "fleet.seed": _EXP.fleet_seed,
    "fleet.dt": FleetConfig.dt,
    "fleet.duration": FleetConfig.duration,
    "fleet.accel_noise_sigma": FleetConfig.accel_noise_sigma,
    "fleet.drift_rate": FleetConfig.drift_rate,
    "fleet.drift_vol": FleetConfig.drift_vol,
    "fleet.style_jitter": FleetConfig.style_jitter,
    "extract.max_lateral": ExtractionCriteria.max_lateral,
    "extract.min_duration": ExtractionCriteria.min_duration,
    "extract.min_events_per_driver": ExtractionCriteria.min_events_per_driver,
    "extract.require_constant_lv": ExtractionCriteria.require_constant_lv,
    "split.n_train_drivers": SplitSpec.n_train_drivers,
    "split.n_test_drivers": SplitSpec.n_test_drivers,
    "split.support_fraction": SplitSpec.support_fraction,
    **_box_defaults("box", DEFAULT_IDM_BOX),
    **_box_defaults("ghr_box", DEFAULT_GHR_BOX),
    "ga.population": _EXP.ga.population,
    "ga.generations": _EXP.ga.generations,
    "ga.crossover_rate": GAConfig.crossover_rate,
    "ga.mutation_rate": GAConfig.mutation_rate,
    "ga.mutation_sigma": GAConfig.mutation_sigma,
    "ga.tournament_size": GAConfig.tournament_size,
    "ga.elitism": GAConfig.elitism,
    "ga.events_per_driver": _EXP.ga_events_per_driver,
    "model.hidden": _EXP.hidden,
    "model.window": _EXP.window,
    "model.window_stride": _EXP.window_stride,
    "pretrain.steps": _EXP.pretrain.steps,
    "pretrain.batch": _EXP.pretrain.batch,
    "pretrain.lr": _EXP.pretrain.lr,
    "meta.alpha": _EXP.meta.alpha,
    "meta.beta": _EXP.meta.beta,
    "meta.k_inner": _EXP.meta.k_inner,
    "meta.meta_batch": _EXP.meta.meta_batch,
    "meta.outer_steps": _EXP.meta.outer_steps,
    "meta.first_order": _EXP.meta.first_order,
    "meta.clip_norm": _EXP.meta.clip_norm or 0.0,  # 0 disables clipping
    "meta.warm_start": _EXP.warm_start_meta,
    "meta.checkpoint_every": 50,
    "eval.warmup": _EXP.warmup,
    "style.accel_edges": ThresholdTable.accel_edges,
    "style.relspeed_edges": ThresholdTable.relspeed_edges,
    "style.spacing_edges": ThresholdTable.spacing_edges,
    "style.derive": False,
}

# keys that change how work is scheduled but never what is computed
SCHEDULING_KEYS = ("run.threads",)
DEFAULTS["run.threads"] = 1


def parse_value(key: str, text: str):
    """Parse ``text`` to the type of ``DEFAULTS[key]``."""
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key {key!r}")
    default = DEFAULTS[key]
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            parts = [p for p in text.replace(" ", "").split(",") if p]
            return tuple(float(p) for p in parts)
        return text
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def read_config_file(path) -> dict:
    """Parse a key=value file into typed overrides."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    out = {}
    for lineno, raw in enumerate(p.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{p}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = parse_value(key, value)
    return out


class RunConfig:
    """Resolved configuration: ``defaults <- file <- overrides``."""

    def __init__(self, values: dict | None = None):
        self.values = dict(DEFAULTS)
        for k, v in (values or {}).items():
            if k not in DEFAULTS:
                raise ConfigError(f"unknown config key {k!r}")
            self.values[k] = v
        self._validate()

    @classmethod
    def layered(cls, path=None, overrides: dict | None = None) -> "RunConfig":
        merged = read_config_file(path) if path else {}
        merged.update(overrides or {})
        return cls(merged)

    def __getitem__(self, key: str):
        return self.values[key]

    def with_values(self, **changes) -> "RunConfig":
        vals = dict(self.values)
        vals.update({k.replace("__", "."): v for k, v in changes.items()})
        return RunConfig(vals)

    def _validate(self) -> None:
        # building every typed section surfaces invalid combinations early
        try:
            self.idm_box()
            self.ghr_box()
            self.fleet()
            self.extraction()
            self.split()
            self.ga()
            self.meta()
            self.thresholds()
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from None

    # typed views -------------------------------------------------------

    def _box(self, prefix: str, names) -> FeasibleBox:
        pairs = [self.values[f"{prefix}.{n}"] for n in names]
        if any(len(p) != 2 for p in pairs):
            raise ConfigError(f"{prefix} entries need exactly two numbers (lower, upper)")
        return FeasibleBox(tuple(names), tuple(p[0] for p in pairs), tuple(p[1] for p in pairs))

    def idm_box(self) -> FeasibleBox:
        return self._box("box", IDM_FIELDS)

    def ghr_box(self) -> FeasibleBox:
        return self._box("ghr_box", GHR_FIELDS)

    def fleet(self) -> FleetConfig:
        v = self.values
        if len(v["fleet.duration"]) != 2 or len(v["fleet.drift_vol"]) != 6:
            raise ConfigError("fleet.duration needs 2 values and fleet.drift_vol needs 6")
        return FleetConfig(dt=v["fleet.dt"], duration=v["fleet.duration"], accel_noise_sigma=v["fleet.accel_noise_sigma"],
                           drift_rate=v["fleet.drift_rate"], drift_vol=v["fleet.drift_vol"],
                           style_jitter=v["fleet.style_jitter"], box=self.idm_box())

    def extraction(self) -> ExtractionCriteria:
        v = self.values
        return ExtractionCriteria(v["extract.max_lateral"], v["extract.min_duration"],
                                  v["extract.min_events_per_driver"], v["extract.require_constant_lv"])

    def split(self) -> SplitSpec:
        v = self.values
        return SplitSpec(v["split.n_train_drivers"], v["split.n_test_drivers"], v["split.support_fraction"], v["seed"])

    def ga(self) -> GAConfig:
        v = self.values
        return GAConfig(v["ga.population"], v["ga.generations"], v["ga.crossover_rate"], v["ga.mutation_rate"],
                        v["ga.mutation_sigma"], v["ga.tournament_size"], v["ga.elitism"], v["seed"])

    def meta(self) -> MetaConfig:
        v = self.values
        return MetaConfig(v["meta.alpha"], v["meta.beta"], v["meta.k_inner"], v["meta.meta_batch"],
                          v["meta.outer_steps"], v["meta.first_order"],
                          v["meta.clip_norm"] or None)

    def pretrain(self) -> PretrainConfig:
        v = self.values
        return PretrainConfig(v["pretrain.steps"], v["pretrain.batch"], v["pretrain.lr"])

    def thresholds(self) -> ThresholdTable:
        v = self.values
        return ThresholdTable(v["style.accel_edges"], v["style.relspeed_edges"], v["style.spacing_edges"])

    def experiment(self) -> ExperimentConfig:
        v = self.values
        return ExperimentConfig(
            n_drivers=v["fleet.drivers"], events_per_driver=v["fleet.events"], fleet_seed=v["fleet.seed"],
            fleet=self.fleet(), split=self.split(), hidden=v["model.hidden"], window=v["model.window"],
            window_stride=v["model.window_stride"], ga=self.ga(), ga_events_per_driver=v["ga.events_per_driver"],
            pretrain=self.pretrain(), meta=self.meta(), warm_start_meta=v["meta.warm_start"],
            warmup=v["eval.warmup"], idm_box=self.idm_box(), ghr_box=self.ghr_box(),
        )

    # serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in sorted(self.values.items())}

    def fingerprint(self) -> str:
        """sha256 of the canonical JSON of every computation-relevant key."""
        d = {k: v for k, v in self.to_dict().items() if k not in SCHEDULING_KEYS}
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    def provenance(self) -> dict:
        return {"version": __version__, "config_fingerprint": self.fingerprint(), "config": self.to_dict()}

    def to_text(self) -> str:
        lines = []
        for k, v in sorted(self.values.items()):
            text = ", ".join(repr(float(x)) for x in v) if isinstance(v, tuple) else str(v).lower() if isinstance(v, bool) else repr(v) if isinstance(v, float) else str(v)
            lines.append(f"{k} = {text}")
        return "\n".join(lines) + "\n"
