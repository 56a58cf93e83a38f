"""Surveillance cohort records and stratified viral-load imputation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
import pandas as pd

from .grid import GridSpec, cells_of

logger = logging.getLogger(__name__)

COHORT_COLUMNS = [
    "person_id", "year", "sex", "age", "hiv_status",
    "viral_load", "easting", "northing", "ds_round",
]
AGE_BAND_MIN = 15
AGE_BAND_MAX = 54
AGE_BAND_WIDTH = 5


class ImputationError(RuntimeError):
    """No donor viral loads available for a record even after widening."""


@dataclass(frozen=True)
class PersonYearRecord:
    person_id: str
    year: int
    sex: str
    age: float
    hiv_status: str
    viral_load: float | None = None
    easting: float | None = None
    northing: float | None = None
    ds_round: str = ""


@dataclass(frozen=True, order=True)
class AgeBand:
    lower: int
    upper: int

    def __str__(self):
        return f"{self.lower}-{self.upper}"


@dataclass
class ImputationStratum:
    ds_round: str
    sex: str
    age_band: AgeBand
    donor_pool: list = field(default_factory=list)


def as_frame(cohort) -> pd.DataFrame:
    """Coerce a list of :class:`PersonYearRecord` or a frame to the cohort frame."""
    if isinstance(cohort, pd.DataFrame):
        df = cohort.copy()
    else:
        df = pd.DataFrame([r.__dict__ for r in cohort], columns=COHORT_COLUMNS)
    missing = [c for c in COHORT_COLUMNS if c not in df.columns]
    if missing:
        raise ValueError(f"cohort is missing columns: {missing}")
    for c in ("viral_load", "easting", "northing", "age"):
        df[c] = pd.to_numeric(df[c], errors="coerce").astype(float)
    df["year"] = df["year"].astype(int)
    df["person_id"] = df["person_id"].astype(str)
    df["ds_round"] = df["ds_round"].astype(str)
    return df


def validate_cohort(df: pd.DataFrame) -> None:
    bad_sex = ~df["sex"].isin(["male", "female"])
    if bad_sex.any():
        raise ValueError(f"invalid sex values: {sorted(df.loc[bad_sex, 'sex'].unique())}")
    bad_status = ~df["hiv_status"].isin(["positive", "negative"])
    if bad_status.any():
        raise ValueError(f"invalid hiv_status values: {sorted(df.loc[bad_status, 'hiv_status'].unique())}")
    vl_neg = df["viral_load"].notna() & (df["hiv_status"] != "positive")
    if vl_neg.any():
        raise ValueError(f"{int(vl_neg.sum())} HIV-negative records carry a viral load")
    if (df["viral_load"] < 0).any():
        raise ValueError("negative viral load")
    dup = df.duplicated(["person_id", "year"])
    if dup.any():
        first = df.loc[dup, ["person_id", "year"]].iloc[0].tolist()
        raise ValueError(f"duplicate (person_id, year) records, e.g. {first}")


def age_band(age: float) -> AgeBand:
    """Five-year band for ``age``; ages outside 15-54 are clamped to the edge bands."""
    a = min(max(float(age), AGE_BAND_MIN), AGE_BAND_MAX)
    lower = AGE_BAND_MIN + AGE_BAND_WIDTH * int((a - AGE_BAND_MIN) // AGE_BAND_WIDTH)
    return AgeBand(lower, lower + AGE_BAND_WIDTH - 1)


def _band_lowers(ages: pd.Series) -> np.ndarray:
    a = np.clip(ages.to_numpy(dtype=float), AGE_BAND_MIN, AGE_BAND_MAX)
    return (AGE_BAND_MIN + AGE_BAND_WIDTH * ((a - AGE_BAND_MIN) // AGE_BAND_WIDTH)).astype(int)


def _warn_out_of_band(df: pd.DataFrame) -> int:
    n = int(((df["age"] < AGE_BAND_MIN) | (df["age"] > AGE_BAND_MAX)).sum())
    if n:
        logger.warning("%d records with age outside %d-%d clamped to edge age bands",
                       n, AGE_BAND_MIN, AGE_BAND_MAX)
    return n


def build_strata(cohort) -> dict[tuple[str, str, AgeBand], ImputationStratum]:
    """Donor pools of measured viral loads keyed by (round, sex, age band)."""
    df = as_frame(cohort)
    if df.empty:
        raise ValueError("cohort is empty")
    _warn_out_of_band(df)
    measured = df[(df["hiv_status"] == "positive") & df["viral_load"].notna()].copy()
    measured["_band"] = _band_lowers(measured["age"])
    strata = {}
    for (rnd, sex, lower), g in measured.groupby(["ds_round", "sex", "_band"], sort=True):
        band = AgeBand(int(lower), int(lower) + AGE_BAND_WIDTH - 1)
        strata[(rnd, sex, band)] = ImputationStratum(rnd, sex, band, g["viral_load"].tolist())
    return strata


def _pool_lookup(strata):
    """Widened pools following the fallback order documented in the README."""
    by_round_sex: dict = {}
    by_sex_band: dict = {}
    by_sex: dict = {}
    for (rnd, sex, band), s in sorted(strata.items()):
        by_round_sex.setdefault((rnd, sex), []).extend(s.donor_pool)
        by_sex_band.setdefault((sex, band), []).extend(s.donor_pool)
        by_sex.setdefault(sex, []).extend(s.donor_pool)

    def lookup(rnd, sex, band):
        for pool in (
            strata[(rnd, sex, band)].donor_pool if (rnd, sex, band) in strata else None,
            by_round_sex.get((rnd, sex)),
            by_sex_band.get((sex, band)),
            by_sex.get(sex),
        ):
            if pool:
                return pool
        return None

    return lookup


def impute_viral_loads(cohort, strata=None, seed=0) -> pd.DataFrame:
    """Fill missing viral loads of HIV-positive records by donor sampling.

    Donors are drawn uniformly with replacement from the stratum of the same
    surveillance round, sex and age band. Measured values are kept and marked
    ``vl_source = "measured"``; drawn values are marked ``"imputed"``.

    Raises
    ------
    ImputationError
        If a positive record has no donors even after widening the stratum.
    """
    df = as_frame(cohort)
    validate_cohort(df)
    if strata is None:
        strata = build_strata(df)
    rng = np.random.default_rng(seed)
    pos = df["hiv_status"] == "positive"
    df["vl_source"] = np.where(pos & df["viral_load"].notna(), "measured", "")
    need = pos & df["viral_load"].isna()
    if not need.any():
        return df
    lookup = _pool_lookup(strata)
    todo = df.loc[need, ["ds_round", "sex", "age"]].copy()
    todo["_band"] = _band_lowers(todo["age"])
    values = df["viral_load"].to_numpy(copy=True)
    for (rnd, sex, lower), g in todo.groupby(["ds_round", "sex", "_band"], sort=True):
        band = AgeBand(int(lower), int(lower) + AGE_BAND_WIDTH - 1)
        pool = lookup(rnd, sex, band)
        if pool is None:
            rows = df.loc[g.index, ["person_id", "year"]].to_records(index=False).tolist()
            raise ImputationError(
                f"no donor viral loads for stratum ({rnd}, {sex}, {band}); records {rows}"
            )
        draws = rng.integers(0, len(pool), size=len(g))
        values[df.index.get_indexer(g.index)] = np.asarray(pool, dtype=float)[draws]
    df["viral_load"] = values
    df.loc[need, "vl_source"] = "imputed"
    return df


def eligible_for_year(cohort, year: int, spec: GridSpec) -> pd.DataFrame:
    """Records for ``year`` with a homestead inside the grid extent."""
    df = as_frame(cohort) if not isinstance(cohort, pd.DataFrame) else cohort
    sel = df[(df["year"] == year) & df["easting"].notna() & df["northing"].notna()]
    col, _ = cells_of(sel["easting"].to_numpy(), sel["northing"].to_numpy(), spec)
    return sel[col >= 0]


def records(df: pd.DataFrame) -> Iterable[PersonYearRecord]:
    for row in df[COHORT_COLUMNS].itertuples(index=False):
        d = row._asdict()
        for k in ("viral_load", "easting", "northing"):
            if pd.isna(d[k]):
                d[k] = None
        yield PersonYearRecord(**d)
