"""Pipeline configuration: INI-style key/value file plus command-line overrides."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .grid import GridSpec
from .surface import CtiParams, KernelParams
from .synth import ScenarioConfig


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass
class Paths:
    output_dir: str = "output"
    cohort: str = ""
    gps: str = ""
    participants: str = ""

    def resolve(self, name: str, default_name: str) -> Path:
        value = getattr(self, name)
        return Path(value) if value else Path(self.output_dir) / default_name


@dataclass
class PipelineConfig:
    paths: Paths = field(default_factory=Paths)
    grid: GridSpec = field(default_factory=GridSpec)
    kernel: KernelParams = field(default_factory=KernelParams)
    cti: CtiParams = field(default_factory=CtiParams)
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    vl_floor: float = 1.0
    gap_cap: float = 1800.0
    gamma_grid: tuple = (50, 55, 60, 65, 70, 75, 80, 85, 90, 95)
    size_gammas: tuple = (50, 95, 100)
    surface_year: int = 2019
    pooled: bool = False
    hi_percentile: float = 80.0
    lo_percentile: float = 20.0
    seed: int = 20240601
    total_time_denominator: str = "in_area"
    response_scale: float = 1.0
    quadrature_points: int = 15
    max_iter: int = 500
    export_geojson: bool = True
    oracle_glmm_reps: int = 5

    def provenance(self) -> dict:
        """Hash over everything except file locations, so outputs are location independent."""
        d = to_dict(self)
        d.pop("paths")
        blob = json.dumps(d, sort_keys=True, default=str).encode()
        return {"config_hash": hashlib.sha256(blob).hexdigest()[:16], "seed": self.seed}


_SECTIONS = {
    "paths": Paths,
    "grid": GridSpec,
    "kernel": KernelParams,
    "cti": CtiParams,
    "scenario": ScenarioConfig,
}


def to_dict(cfg: PipelineConfig) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        out[f.name] = dataclasses.asdict(v) if dataclasses.is_dataclass(v) else v
    return out


def _coerce(name: str, raw: str, template):
    raw = raw.strip()
    try:
        if isinstance(template, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(template, int):
            return int(raw)
        if isinstance(template, float):
            return float(raw)
        if isinstance(template, tuple) or (template is None and "," in raw):
            items = [x.strip() for x in raw.split(",") if x.strip()]
            kind = type(template[0]) if template else float
            return tuple(kind(x) for x in items)
        if template is None:
            return None if raw.lower() in ("", "none") else tuple(float(x) for x in raw.split(","))
        return raw
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{name}: cannot parse {raw!r} ({exc})") from None


def _apply(obj, section: str, values: dict):
    names = {f.name for f in dataclasses.fields(obj)}
    changes = {}
    for key, raw in values.items():
        if key not in names:
            raise ConfigError(f"{section}.{key}: unknown field")
        template = getattr(obj, key)
        if dataclasses.is_dataclass(template):
            raise ConfigError(f"{section}.{key}: set nested fields in their own section")
        changes[key] = _coerce(f"{section}.{key}", raw, template)
    try:
        return dataclasses.replace(obj, **changes)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{section}: {exc}") from None


def load_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    """Read an INI file (sections ``pipeline``, ``paths``, ``grid``, ``kernel``, ``cti``,
    ``scenario``) and apply ``overrides`` given as ``{"section.key": "value"}``."""
    parser = configparser.ConfigParser()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config: file not found: {p}")
        try:
            parser.read(p)
        except configparser.Error as exc:
            raise ConfigError(f"config: {exc}") from None
    sections: dict = {s: dict(parser[s]) for s in parser.sections()}
    for key, value in (overrides or {}).items():
        if "." in key:
            sec, k = key.split(".", 1)
        else:
            sec, k = "pipeline", key
        sections.setdefault(sec, {})[k] = str(value)
    cfg = PipelineConfig()
    for sec, values in sections.items():
        if sec == "pipeline":
            cfg = _apply(cfg, "pipeline", values)
        elif sec in _SECTIONS:
            setattr(cfg, sec, _apply(getattr(cfg, sec), sec, values))
        else:
            raise ConfigError(f"{sec}: unknown section")
    # the scenario generates data on the pipeline grid with the master seed
    cfg.scenario = dataclasses.replace(cfg.scenario, grid=cfg.grid, seed=cfg.seed)
    validate(cfg)
    return cfg


def validate(cfg: PipelineConfig) -> None:
    if cfg.total_time_denominator not in ("in_area", "all"):
        raise ConfigError("pipeline.total_time_denominator: must be 'in_area' or 'all'")
    if any(not 0 < g <= 100 for g in cfg.gamma_grid + cfg.size_gammas):
        raise ConfigError("pipeline.gamma_grid: values must lie in (0, 100]")
    if not 0 <= cfg.lo_percentile <= cfg.hi_percentile <= 100:
        raise ConfigError("pipeline.hi_percentile/lo_percentile: need 0 <= lo <= hi <= 100")
    if cfg.vl_floor <= 0:
        raise ConfigError("pipeline.vl_floor: must be positive")
    if cfg.gap_cap <= 0:
        raise ConfigError("pipeline.gap_cap: must be positive")
    if cfg.response_scale <= 0:
        raise ConfigError("pipeline.response_scale: must be positive")
    if cfg.quadrature_points < 1:
        raise ConfigError("pipeline.quadrature_points: must be at least 1")
    out = Path(cfg.paths.output_dir)
    if out.exists() and not out.is_dir():
        raise ConfigError(f"paths.output_dir: not a directory: {out}")
    for name in ("cohort", "gps", "participants"):
        value = getattr(cfg.paths, name)
        if not value:
            continue
        p = Path(value)
        if p.is_dir():
            raise ConfigError(f"paths.{name}: is a directory: {p}")
        # the nearest existing ancestor must be a directory we could write into
        for parent in p.parents:
            if parent.exists():
                if not parent.is_dir():
                    raise ConfigError(f"paths.{name}: {parent} is not a directory")
                break


def dump_config(cfg: PipelineConfig) -> str:
    """INI text that :func:`load_config` reads back to an equal configuration."""
    d = to_dict(cfg)
    lines = ["[pipeline]"]
    for k, v in d.items():
        if isinstance(v, dict):
            continue
        lines.append(f"{k} = {_fmt(v)}")
    for sec in _SECTIONS:
        lines.append("")
        lines.append(f"[{sec}]")
        for k, v in d[sec].items():
            if sec == "scenario" and k in ("grid", "seed"):
                continue
            lines.append(f"{k} = {_fmt(v)}")
    return "\n".join(lines) + "\n"


def _fmt(v):
    if isinstance(v, (tuple, list)):
        return ", ".join(str(x) for x in v)
    if v is None:
        return "none"
    return str(v)
