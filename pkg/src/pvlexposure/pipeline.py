"""Pipeline stages. Each stage reads its inputs from and writes its outputs to disk."""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np
import pandas as pd

from . import formats, nbglmm
from .activity import activity_space_sizes, ingest_all
from .cohort import ImputationError, eligible_for_year, impute_viral_loads
from .config import ConfigError, PipelineConfig
from .exposure import InsufficientSampleError, classify_risk, exposure_matrix
from .surface import METRICS, EmptySurfaceError, smooth_surfaces, summarize, surface_summary
from .synth import gen_cohort, gen_participants, gen_trajectories, oracle_suite

logger = logging.getLogger(__name__)


class InsufficientDataError(RuntimeError):
    pass


class NonConvergenceError(RuntimeError):
    pass


class OracleFailure(RuntimeError):
    pass


def _out(cfg: PipelineConfig, *parts) -> Path:
    return Path(cfg.paths.output_dir).joinpath(*parts)


def _require(path: Path, what: str) -> Path:
    if not path.is_file():
        raise ConfigError(f"paths.{what}: file not found: {path}")
    return path


def _year_label(cfg: PipelineConfig, year) -> str:
    return "pooled" if cfg.pooled else str(year)


# ---------------------------------------------------------------------------

def run_synth(cfg: PipelineConfig) -> dict:
    prov = cfg.provenance()
    cohort = gen_cohort(cfg.scenario)
    fixes = gen_trajectories(cfg.scenario)
    participants = gen_participants(cfg.scenario)
    formats.write_cohort(cohort, cfg.paths.resolve("cohort", "cohort.csv"), prov)
    formats.write_gps(fixes, cfg.paths.resolve("gps", "gps.csv"), prov)
    formats.write_table(participants, cfg.paths.resolve("participants", "participants.csv"), prov)
    counts = {"cohort_rows": len(cohort), "gps_rows": len(fixes), "participants": len(participants)}
    logger.info("synth: %s", counts)
    return counts


def _impute(cohort: pd.DataFrame, seed: int) -> pd.DataFrame:
    if cohort.empty:
        raise InsufficientDataError("cohort file has no records")
    try:
        return impute_viral_loads(cohort, seed=seed)
    except ImputationError as exc:
        raise InsufficientDataError(str(exc)) from None


def load_imputed_cohort(cfg: PipelineConfig) -> pd.DataFrame:
    """Imputed cohort, imputing (and caching to disk) when ``vl_source`` is absent."""
    cached = _out(cfg, "cohort_imputed.csv")
    src = _require(cfg.paths.resolve("cohort", "cohort.csv"), "cohort")
    cohort = formats.read_cohort(src)
    if "vl_source" in cohort.columns:
        return cohort
    if cached.is_file():
        return formats.read_cohort(cached)
    imputed = _impute(cohort, cfg.seed)
    formats.write_cohort(imputed, cached, cfg.provenance())
    return imputed


def run_surfaces(cfg: PipelineConfig) -> dict:
    prov = cfg.provenance()
    src = _require(cfg.paths.resolve("cohort", "cohort.csv"), "cohort")
    cohort = formats.read_cohort(src)
    if "vl_source" not in cohort.columns:
        cohort = _impute(cohort, cfg.seed)
        formats.write_cohort(cohort, _out(cfg, "cohort_imputed.csv"), prov)
    years = sorted(cohort["year"].unique())
    batches = []
    if cfg.pooled:
        recs = pd.concat([eligible_for_year(cohort, y, cfg.grid) for y in years])
        batches.append(("pooled", None, recs))
    else:
        for y in years:
            batches.append((str(y), int(y), eligible_for_year(cohort, y, cfg.grid)))
    if all(len(r) == 0 for _, _, r in batches):
        raise InsufficientDataError("no eligible residents inside the grid")
    written = {}
    for label, year, recs in batches:
        if len(recs) == 0:
            logger.warning("year %s: no eligible residents, skipped", label)
            continue
        surfaces = smooth_surfaces(recs, cfg.grid, cfg.kernel, cfg.cti, cfg.vl_floor, year)
        rows = []
        for m in METRICS:
            formats.write_surface(surfaces[m], _out(cfg, "surfaces", f"{m.value}_{label}.csv"), prov)
            try:
                stats = surface_summary(surfaces[m])
            except EmptySurfaceError:
                logger.warning("%s %s: fully masked or all-zero surface; summary left empty", m.value, label)
                stats = {k: np.nan for k in ("mean", "sd", "min", "q1", "median", "q3", "max")}
            rows.append({"metric": m.value, **stats})
        formats.write_table(pd.DataFrame(rows), _out(cfg, f"surface_summary_{label}.csv"), prov)
        if cfg.export_geojson:
            formats.write_surfaces_geojson(surfaces, cfg.grid, _out(cfg, f"surfaces_{label}.geojson"), prov)
        written[label] = len(recs)
    return written


def _load_surfaces(cfg: PipelineConfig) -> dict:
    label = "pooled" if cfg.pooled else str(cfg.surface_year)
    out = {}
    for m in METRICS:
        p = _out(cfg, "surfaces", f"{m.value}_{label}.csv")
        if not p.is_file():
            raise ConfigError(f"pipeline.surface_year: no surface for {label} ({p} missing; run 'surfaces')")
        out[m] = formats.read_surface(p, m, cfg.grid, None if cfg.pooled else cfg.surface_year)
    return out


def _ingest(cfg: PipelineConfig):
    fixes = formats.read_gps(_require(cfg.paths.resolve("gps", "gps.csv"), "gps"))
    return ingest_all(fixes, cfg.grid, cfg.gap_cap, cfg.total_time_denominator)


def _exposure_gammas(cfg: PipelineConfig):
    return sorted(set(cfg.gamma_grid) | set(cfg.size_gammas) | {100})


def run_exposure(cfg: PipelineConfig) -> dict:
    prov = cfg.provenance()
    surfaces = _load_surfaces(cfg)
    dists, failures = _ingest(cfg)
    for pid, msg in failures.items():
        logger.warning("participant %s skipped: %s", pid, msg)
    if not dists:
        raise InsufficientDataError("no usable GPS participants")
    size_rows = []
    for d in dists:
        for g, n in activity_space_sizes(d, cfg.size_gammas).items():
            size_rows.append((d.participant_id, g, n))
    sizes = pd.DataFrame(size_rows, columns=["participant_id", "gamma", "n_cells"])
    formats.write_table(sizes, _out(cfg, "activity_space_sizes.csv"), prov)
    summary = []
    for g, grp in sizes.groupby("gamma", sort=True):
        summary.append({"level": f"A_{g:g}", **summarize(grp["n_cells"].to_numpy(dtype=float))})
    formats.write_table(pd.DataFrame(summary), _out(cfg, "activity_space_summary.csv"), prov)
    formats.write_table(formats.activity_space_frame(dists, cfg.size_gammas), _out(cfg, "activity_spaces.csv"), prov)
    table = exposure_matrix(dists, surfaces, _exposure_gammas(cfg), failures)
    formats.write_table(table, _out(cfg, "exposures.csv"), prov)
    return {"participants": len(dists), "failed": len(failures), "exposure_rows": len(table)}


def regression_rows(exposures: pd.DataFrame, participants: pd.DataFrame, metric: str,
                    gammas, response_scale: float = 1.0) -> pd.DataFrame:
    e = exposures[(exposures["metric"] == metric) & exposures["gamma"].isin(list(gammas))]
    e = e[np.isfinite(e["value"])]
    p = participants.assign(participant_id=participants["participant_id"].astype(str))
    m = e.assign(participant_id=e["participant_id"].astype(str)).merge(p, on="participant_id", how="inner")
    return pd.DataFrame({
        "participant_id": m["participant_id"],
        "gamma": m["gamma"].astype(float),
        "response": m["value"].astype(float) * response_scale,
        "male": (m["sex"] == "male").astype(float),
        "n_grids": m["n_cells"].astype(float),
        "age": m["age"].astype(float),
    })


def run_regress(cfg: PipelineConfig) -> dict:
    prov = cfg.provenance()
    exp_path = _out(cfg, "exposures.csv")
    if not exp_path.is_file():
        raise ConfigError(f"paths.output_dir: {exp_path} missing; run 'exposure' first")
    exposures = formats.read_table(exp_path, dtype={"participant_id": str}, keep_default_na=True)
    participants = formats.read_table(
        _require(cfg.paths.resolve("participants", "participants.csv"), "participants"),
        dtype={"participant_id": str},
    )
    results = {}
    table = []
    for m in METRICS:
        rows = regression_rows(exposures, participants, m.value, cfg.gamma_grid, cfg.response_scale)
        try:
            design = nbglmm.build_design(rows)
        except (ValueError, nbglmm.DegenerateModelError) as exc:
            raise InsufficientDataError(f"E^{m.value}: {exc}") from None
        full = nbglmm.fit_design(design, cfg.quadrature_points, cfg.max_iter)
        tests = [nbglmm.lrt(full, None, b, cfg.quadrature_points, cfg.max_iter, design=design)
                 for b in nbglmm.BLOCKS]
        rep = nbglmm.report(full, tests, outcome=f"E^{m.value}", response_scale=cfg.response_scale)
        rep["gammas"] = list(cfg.gamma_grid)
        formats.write_json(rep, _out(cfg, "models", f"model_{m.value}.json"), prov)
        for c in rep["coefficients"]:
            table.append({"outcome": m.value, **c})
        results[m.value] = full.converged and all(t.p_value is not None for t in tests)
    formats.write_table(pd.DataFrame(table), _out(cfg, "regression_table.csv"), prov)
    bad = [k for k, ok in results.items() if not ok]
    if bad:
        raise NonConvergenceError(f"non-converged fits: {bad}")
    return results


def _full_spaces(cfg: PipelineConfig) -> dict:
    p = _out(cfg, "activity_spaces.csv")
    if not p.is_file():
        raise ConfigError(f"paths.output_dir: {p} missing; run 'exposure' first")
    df = formats.read_table(p, dtype={"participant_id": str})
    df = df[df["gamma"] == 100]
    return {pid: set(zip(g["cell_col"].astype(int), g["cell_row"].astype(int)))
            for pid, g in df.groupby("participant_id")}


def run_riskgroups(cfg: PipelineConfig) -> dict:
    from .grid import CellId
    prov = cfg.provenance()
    exp_path = _out(cfg, "exposures.csv")
    if not exp_path.is_file():
        raise ConfigError(f"paths.output_dir: {exp_path} missing; run 'exposure' first")
    exposures = formats.read_table(exp_path, dtype={"participant_id": str})
    spaces = {pid: {CellId(*c) for c in cells} for pid, cells in _full_spaces(cfg).items()}
    out = {}
    summary = []
    for basis in ("PVL", "PVL_P"):
        try:
            high, low = classify_risk(exposures, basis, cfg.hi_percentile, cfg.lo_percentile, spaces)
        except InsufficientSampleError as exc:
            raise InsufficientDataError(str(exc)) from None
        for g in (high, low):
            members = pd.DataFrame({"participant_id": sorted(g.members)})
            formats.write_table(members, _out(cfg, "riskgroups", f"{basis}_{g.label}.csv"), prov)
            summary.append({"basis": basis, "group": g.label, "n_members": len(g.members),
                            "n_collective_cells": len(g.collective_cells)})
        formats.write_groups_geojson([high, low], cfg.grid, _out(cfg, "riskgroups", f"{basis}.geojson"), prov)
        out[basis] = (len(high.members), len(low.members))
    formats.write_table(pd.DataFrame(summary), _out(cfg, "riskgroups", "summary.csv"), prov)
    return out


def run_oracle(cfg: PipelineConfig) -> list:
    prov = cfg.provenance()
    cohort = load_imputed_cohort(cfg)
    if cfg.pooled:
        recs = pd.concat([eligible_for_year(cohort, y, cfg.grid) for y in sorted(cohort["year"].unique())])
    else:
        recs = eligible_for_year(cohort, cfg.surface_year, cfg.grid)
    try:
        surfaces = _load_surfaces(cfg)
    except ConfigError:
        surfaces = {}
    dists, _ = _ingest(cfg) if cfg.paths.resolve("gps", "gps.csv").is_file() else ([], {})
    exp_path = _out(cfg, "exposures.csv")
    exposures = formats.read_table(exp_path, dtype={"participant_id": str}) if exp_path.is_file() else None
    reports = oracle_suite(
        {"records": recs, "surfaces": surfaces, "spec": cfg.grid, "kernel": cfg.kernel,
         "dists": dists, "exposures": exposures},
        glmm_reps=cfg.oracle_glmm_reps, seed=cfg.seed,
    )
    formats.write_json({"checks": [r.to_dict() for r in reports]}, _out(cfg, "oracle_report.json"), prov)
    failed = [r.name for r in reports if not r.passed]
    if failed:
        raise OracleFailure(f"oracle checks failed: {failed}")
    return reports


STAGES = {
    "synth": run_synth,
    "surfaces": run_surfaces,
    "exposure": run_exposure,
    "regress": run_regress,
    "riskgroups": run_riskgroups,
    "oracle": run_oracle,
}


def run_all(cfg: PipelineConfig) -> None:
    for name in ("synth", "surfaces", "exposure", "regress", "riskgroups", "oracle"):
        logger.info("stage %s", name)
        STAGES[name](cfg)
