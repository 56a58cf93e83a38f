"""Readers and writers for the delimited text, JSON and GeoJSON files."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pandas as pd

from .cohort import COHORT_COLUMNS
from .grid import CellId, GridSpec, cell_polygon_lonlat
from .surface import Surface

GPS_COLUMNS = ["participant_id", "timestamp_iso8601", "lat", "lon"]
SURFACE_COLUMNS = ["col", "row", "easting", "northing", "value", "masked"]
ACTIVITY_SPACE_COLUMNS = ["participant_id", "gamma", "cell_col", "cell_row", "weight"]


def _header(provenance: dict | None) -> str:
    if not provenance:
        return ""
    return "# " + " ".join(f"{k}={v}" for k, v in provenance.items()) + "\n"


def write_table(df: pd.DataFrame, path, provenance: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(_header(provenance))
        df.to_csv(fh, index=False, lineterminator="\n")
    return path


def read_table(path, **kwargs) -> pd.DataFrame:
    """CSV reader that skips leading ``#`` provenance lines."""
    skip = 0
    with open(path) as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            skip += 1
    return pd.read_csv(path, skiprows=skip, **kwargs)


def write_json(obj, path, provenance: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if provenance:
        obj = {"provenance": provenance, **obj}
    path.write_text(json.dumps(obj, indent=2, sort_keys=False, default=_json_default) + "\n")
    return path


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (set, frozenset)):
        return sorted(o)
    raise TypeError(f"not JSON serialisable: {type(o)}")


# cohort -------------------------------------------------------------------

def read_cohort(path) -> pd.DataFrame:
    df = read_table(path, dtype={"person_id": str, "ds_round": str, "sex": str, "hiv_status": str})
    missing = [c for c in COHORT_COLUMNS if c not in df.columns]
    if missing:
        raise ValueError(f"{path}: missing cohort columns {missing}")
    return df


def write_cohort(df: pd.DataFrame, path, provenance=None) -> Path:
    cols = COHORT_COLUMNS + (["vl_source"] if "vl_source" in df.columns else [])
    return write_table(df[cols], path, provenance)


# GPS ----------------------------------------------------------------------

def seconds_to_iso(t) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    stamps = np.datetime_as_string(np.round(t).astype("int64").astype("datetime64[s]"), unit="s")
    return np.char.add(stamps.astype(str), "Z")


def iso_to_seconds(s) -> np.ndarray:
    ts = pd.to_datetime(pd.Series(s), utc=True, format="ISO8601")
    return ((ts - pd.Timestamp(0, tz="UTC")) / pd.Timedelta(seconds=1)).to_numpy(dtype=float)


def write_gps(fixes: pd.DataFrame, path, provenance=None) -> Path:
    out = pd.DataFrame({
        "participant_id": fixes["participant_id"].astype(str),
        "timestamp_iso8601": seconds_to_iso(fixes["timestamp"]),
        "lat": fixes["lat"],
        "lon": fixes["lon"],
    })
    return write_table(out, path, provenance)


def read_gps(path) -> pd.DataFrame:
    df = read_table(path, dtype={"participant_id": str})
    missing = [c for c in GPS_COLUMNS if c not in df.columns]
    if missing:
        raise ValueError(f"{path}: missing GPS columns {missing}")
    return pd.DataFrame({
        "participant_id": df["participant_id"],
        "timestamp": iso_to_seconds(df["timestamp_iso8601"]),
        "lat": df["lat"].astype(float),
        "lon": df["lon"].astype(float),
    })


# surfaces -----------------------------------------------------------------

def surface_frame(s: Surface) -> pd.DataFrame:
    spec = s.spec
    col, row = spec.unflatten(np.arange(spec.n_cells))
    e, n = spec.centroids()
    masked = s.masked
    return pd.DataFrame({
        "col": col, "row": row, "easting": e, "northing": n,
        "value": np.where(masked, np.nan, s.values),
        "masked": masked.astype(int),
    })


def write_surface(s: Surface, path, provenance=None) -> Path:
    return write_table(surface_frame(s), path, provenance)


def read_surface(path, metric, spec: GridSpec, year=None) -> Surface:
    from .surface import MetricKind
    df = read_table(path)
    values = np.full(spec.n_cells, np.nan)
    idx = spec.flat_index(df["col"].to_numpy(), df["row"].to_numpy())
    v = df["value"].to_numpy(dtype=float)
    v[df["masked"].to_numpy(dtype=int) == 1] = np.nan
    values[idx] = v
    return Surface(MetricKind(metric), year, spec, values)


def _feature(cell, spec, props):
    return {
        "type": "Feature",
        "properties": props,
        "geometry": {"type": "Polygon", "coordinates": [cell_polygon_lonlat(cell, spec)]},
    }


def write_surfaces_geojson(surfaces: dict, spec: GridSpec, path, provenance=None) -> Path:
    """One polygon per cell that is unmasked on at least one surface."""
    metrics = list(surfaces)
    stack = np.column_stack([surfaces[m].values for m in metrics])
    keep = np.flatnonzero(~np.isnan(stack).all(axis=1))
    feats = []
    for i in keep:
        c, r = spec.unflatten(i)
        props = {"col": int(c), "row": int(r)}
        for j, m in enumerate(metrics):
            v = stack[i, j]
            props[str(getattr(m, "value", m))] = None if np.isnan(v) else round(float(v), 10)
        feats.append(_feature(CellId(int(c), int(r)), spec, props))
    return write_json({"type": "FeatureCollection", "features": feats}, path, provenance)


def write_groups_geojson(groups, spec: GridSpec, path, provenance=None) -> Path:
    """Collective cells of each risk group, with a group label and colour."""
    colours = {"high": "#d7191c", "low": "#2c7bb6"}
    feats = []
    for g in groups:
        for cell in sorted(g.collective_cells):
            feats.append(_feature(cell, spec, {
                "group": g.label, "basis": g.basis, "fill": colours.get(g.label, "#999999"),
                "col": int(cell[0]), "row": int(cell[1]),
            }))
    return write_json({"type": "FeatureCollection", "features": feats}, path, provenance)


def activity_space_frame(dists, gammas) -> pd.DataFrame:
    from .activity import activity_space
    rows = []
    for d in dists:
        for g in gammas:
            sp = activity_space(d, g)
            for c in sorted(sp.cells):
                rows.append((d.participant_id, g, c[0], c[1], d.weights[c]))
    return pd.DataFrame(rows, columns=ACTIVITY_SPACE_COLUMNS)
