"""Funder x sector panels of neighborhood x period cells."""
from __future__ import annotations

import csv
import logging
import os
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .covariates import (PERIOD_START, STUDY_PERIODS, FixedEffectEncoder, period_of_year)
from .geo import (BOUNDARY_TOL_KM, NEAR_RADIUS_KM, ImageTile, Neighborhood, ProjectRecord,
                  azimuthal_equidistant, haversine_km, locate_points, read_tile)

log = logging.getLogger(__name__)

MIN_TREATED = 100
SPECIFICATIONS = ("a_diffmeans", "b_x_fe", "c1_m", "c2_m_x_fe")
CORE_COLUMNS = ("unit_id", "period", "adm2_id", "country", "treated", "outcome_lead", "tile_ref")


class PanelRejected(Exception):
    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason
        self.detail = detail


class DataError(ValueError):
    pass


def tile_ref(unit_id, period: int) -> str:
    """Composite tile for the 3-year window before ``period``."""
    return f"{unit_id}_p{period - 1}"


class DirectoryTileStore:
    """Tiles stored as ``<root>/<tile_ref>.gctl``."""

    def __init__(self, root):
        self.root = root

    def __getitem__(self, ref) -> ImageTile:
        path = os.path.join(self.root, f"{ref}.gctl")
        if not os.path.exists(path):
            raise KeyError(ref)
        return read_tile(path, ref)

    def __contains__(self, ref):
        return os.path.exists(os.path.join(self.root, f"{ref}.gctl"))


@dataclass
class PanelSlice:
    unit_id: np.ndarray
    period: np.ndarray
    adm2: np.ndarray
    country: np.ndarray
    treated: np.ndarray
    outcome: np.ndarray
    covariates: np.ndarray
    covariate_names: list
    tile_refs: np.ndarray | None = None
    tiles: object = None
    funder: str = ""
    sector: str = ""
    report: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.unit_id)
        for name in ("period", "adm2", "country", "treated", "outcome"):
            if len(getattr(self, name)) != n:
                raise DataError(f"panel column {name} has wrong length")
        self.covariates = np.asarray(self.covariates, dtype=np.float64).reshape(n, -1)
        if self.covariates.shape[1] != len(self.covariate_names):
            raise DataError("covariate matrix width does not match names")
        ok = ~np.isnan(self.outcome)
        if np.any((self.outcome[ok] < 0) | (self.outcome[ok] > 100)):
            raise DataError("outcome_lead outside [0, 100]")

    def __len__(self):
        return len(self.unit_id)

    @property
    def has_outcome(self) -> np.ndarray:
        return ~np.isnan(self.outcome)

    def subset(self, rows) -> "PanelSlice":
        rows = np.asarray(rows)
        return PanelSlice(self.unit_id[rows], self.period[rows], self.adm2[rows], self.country[rows],
                          self.treated[rows], self.outcome[rows], self.covariates[rows],
                          list(self.covariate_names),
                          None if self.tile_refs is None else self.tile_refs[rows],
                          self.tiles, self.funder, self.sector, dict(self.report))

    def tabular(self, fixed_effects: bool = True, fe_min_count: int = 5):
        """Covariates plus period dummies and (optionally) ADM2 dummies."""
        blocks, names = [self.covariates], list(self.covariate_names)
        periods = np.unique(self.period)
        for p in periods[1:]:
            blocks.append((self.period == p).astype(float)[:, None])
            names.append(f"period_{p}")
        if fixed_effects:
            enc = FixedEffectEncoder(min_count=fe_min_count, prefix="adm2").fit(self.adm2)
            blocks.append(enc.transform(self.adm2))
            names.extend(enc.feature_names_)
        return np.hstack(blocks), names

    def pixels(self) -> np.ndarray:
        if self.tiles is None or self.tile_refs is None:
            raise DataError("panel has no tiles attached")
        first = self.tiles[self.tile_refs[0]]
        out = np.empty((len(self), first.pixels.size), dtype=np.float32)
        for i, ref in enumerate(self.tile_refs):
            out[i] = self.tiles[ref].pixels.reshape(-1)
        return out

    def design(self, specification: str, pixels: np.ndarray | None = None) -> np.ndarray:
        """Feature matrix for a propensity specification (``[pixels | tabular]``)."""
        if specification == "b_x_fe":
            return self.tabular()[0]
        if pixels is None:
            pixels = self.pixels()
        if specification == "c1_m":
            return pixels
        if specification == "c2_m_x_fe":
            return np.hstack([pixels, self.tabular()[0]])
        raise ValueError(f"specification {specification!r} has no propensity model")


def drop_constant_covariates(panel: PanelSlice) -> list:
    """Remove covariates without variation across the panel; returns dropped names."""
    sd = panel.covariates.std(axis=0) if len(panel) else np.zeros(len(panel.covariate_names))
    keep = sd > 1e-12
    dropped = [n for n, k in zip(panel.covariate_names, keep) if not k]
    if dropped:
        log.info("dropping covariates without variation: %s", dropped)
    panel.covariates = panel.covariates[:, keep]
    panel.covariate_names = [n for n, k in zip(panel.covariate_names, keep) if k]
    return dropped


# ---------------------------------------------------------------------------
# treatment construction
# ---------------------------------------------------------------------------

def coverage_matrix(units, projects) -> np.ndarray:
    """Boolean (n_units, n_projects): project covers unit under its precision rule."""
    lat = np.array([u.lat for u in units])
    lon = np.array([u.lon for u in units])
    half = np.array([u.square_side_km / 2 for u in units]) + BOUNDARY_TOL_KM
    adm2 = np.array([str(u.adm2_id) for u in units])
    out = np.zeros((len(units), len(projects)), dtype=bool)
    for j, p in enumerate(projects):
        if p.precision == 1:
            x, y = azimuthal_equidistant(lat, lon, p.lat, p.lon)
            out[:, j] = (np.abs(x) <= half) & (np.abs(y) <= half)
        elif p.precision == 2:
            out[:, j] = haversine_km(lat, lon, p.lat, p.lon) <= NEAR_RADIUS_KM + BOUNDARY_TOL_KM
        else:
            out[:, j] = adm2 == str(p.adm2_id)
    return out


def _project_adm2(projects, areas, units):
    """ADM2 of each project: recorded id, else point-in-polygon, else nearest unit's."""
    out = [str(p.adm2_id) if p.adm2_id else None for p in projects]
    todo = [i for i, a in enumerate(out) if a is None]
    if todo and areas:
        found = locate_points(areas, [projects[i].lat for i in todo], [projects[i].lon for i in todo])
        for i, a in zip(todo, found):
            out[i] = a
    if units:
        lat = np.array([u.lat for u in units])
        lon = np.array([u.lon for u in units])
        for i, a in enumerate(out):
            if a is None:
                k = int(np.argmin(haversine_km(lat, lon, projects[i].lat, projects[i].lon)))
                out[i] = str(units[k].adm2_id)
    return out


def concurrent_project_covariates(units, projects, funder, sector, areas=None, adjacency=None):
    """Project-count covariates during each commitment period, log1p-transformed.

    Returns {(unit_id, period): [adjacent_adm2, funder_other_sector, other_funder]}.
    """
    padm2 = _project_adm2(projects, areas, units)
    by_adm2_period = defaultdict(list)
    for p, a in zip(projects, padm2):
        if 2002 <= p.year <= 2013:
            by_adm2_period[(a, period_of_year(p.year))].append(p)
    out = {}
    for u in units:
        for t in STUDY_PERIODS:
            c = np.zeros(3)
            for q in adjacency.get(str(u.adm2_id), ()) if adjacency else ():
                c[0] += len(by_adm2_period.get((q, t), ()))
            for p in by_adm2_period.get((str(u.adm2_id), t), ()):
                if p.funder == funder and str(p.sector_code) != str(sector):
                    c[1] += 1
                if p.funder != funder:
                    c[2] += 1
            out[(u.unit_id, t)] = np.log1p(c)
    return out


def build_panel(units, projects, outcomes: dict, funder: str, sector, tiles=None,
                covariates: dict | None = None, covariate_names=(), areas=None,
                adjacency=None, min_treated: int = MIN_TREATED,
                periods=STUDY_PERIODS) -> PanelSlice:
    """Assemble the lagged panel for one funder x sector.

    ``outcomes`` maps (unit_id, period) -> IWI for the period after each
    commitment period. ``covariates`` maps (unit_id, period) -> values already
    aggregated over the window before ``period``.
    """
    units = list(units)
    sector = str(sector)
    window = [p for p in projects if 2002 <= p.year <= 2013]
    own = [p for p in window if p.funder == funder and str(p.sector_code) == sector]
    padm2 = _project_adm2(own, areas, units)
    country_of_adm2 = {str(u.adm2_id): u.country for u in units}
    if areas:
        country_of_adm2.update({k: a.country for k, a in areas.items()})
    active = {country_of_adm2.get(a) for a in padm2} - {None}

    cover = coverage_matrix(units, own)
    proj_period = np.array([period_of_year(p.year) for p in own], dtype=int)
    derived = {}
    derived_names = []
    if areas is not None or adjacency is not None:
        derived = concurrent_project_covariates(units, window, funder, sector, areas, adjacency)
        derived_names = ["adjacent_adm2_projects", "funder_other_sector_projects", "other_funder_projects"]

    rows = defaultdict(list)
    report = {"funder": funder, "sector": sector, "precision2_rule": "centroid_within_25km",
              "treatment_persistence": "commitment_period_only",
              "dropped_controls_inactive_country": 0, "missing_outcomes": 0,
              "active_countries": sorted(active)}
    for i, u in enumerate(units):
        for t in periods:
            a = int(cover[i, proj_period == t].any()) if len(own) else 0
            if a == 0 and u.country not in active:
                report["dropped_controls_inactive_country"] += 1
                continue
            y = outcomes.get((u.unit_id, t + 1), outcomes.get((str(u.unit_id), t + 1)))
            if y is None or (isinstance(y, float) and np.isnan(y)):
                report["missing_outcomes"] += 1
                y = np.nan
            x = list(covariates.get((u.unit_id, t), [np.nan] * len(covariate_names))) if covariates else []
            if derived:
                x = x + list(derived[(u.unit_id, t)])
            rows["unit_id"].append(u.unit_id)
            rows["period"].append(t)
            rows["adm2"].append(str(u.adm2_id))
            rows["country"].append(u.country)
            rows["treated"].append(a)
            rows["outcome"].append(y)
            rows["x"].append(x)
    names = list(covariate_names) + derived_names
    n_treated = int(np.sum(rows["treated"]))
    report["n_treated"] = n_treated
    if n_treated < min_treated:
        raise PanelRejected("min-treated", f"{funder} x {sector}: {n_treated} treated < {min_treated}")
    X = np.asarray(rows["x"], dtype=float).reshape(len(rows["unit_id"]), len(names))
    bad = np.isnan(X).any(axis=1)
    if bad.any():
        raise DataError(f"{int(bad.sum())} cells lack covariates")
    panel = PanelSlice(
        np.asarray(rows["unit_id"]), np.asarray(rows["period"]), np.asarray(rows["adm2"]),
        np.asarray(rows["country"]), np.asarray(rows["treated"]), np.asarray(rows["outcome"], float),
        X, names, np.array([tile_ref(u, t) for u, t in zip(rows["unit_id"], rows["period"])]),
        tiles, funder, sector, report)
    report["dropped_covariates"] = drop_constant_covariates(panel)
    report["n_cells"] = len(panel)
    report["n_control"] = int(len(panel) - n_treated)
    return panel


def validate_panel(panel: PanelSlice, min_treated: int = MIN_TREATED) -> PanelSlice:
    """Apply the min-treated and no-variation rules to a pre-assembled panel."""
    n_treated = int(panel.treated.sum())
    if n_treated < min_treated:
        raise PanelRejected("min-treated", f"{n_treated} treated < {min_treated}")
    keys = list(zip(panel.unit_id.tolist(), panel.period.tolist()))
    if len(set(keys)) != len(keys):
        raise DataError("duplicate unit x period cells")
    panel.report.update({"n_treated": n_treated, "n_cells": len(panel),
                         "n_control": int(len(panel) - n_treated),
                         "missing_outcomes": int((~panel.has_outcome).sum()),
                         "dropped_covariates": drop_constant_covariates(panel)})
    return panel


# ---------------------------------------------------------------------------
# CSV I/O
# ---------------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return "" if np.isnan(v) else repr(float(v))
    return str(v)


def write_panel_csv(path, panel: PanelSlice):
    refs = panel.tile_refs if panel.tile_refs is not None else [""] * len(panel)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(CORE_COLUMNS) + list(panel.covariate_names))
        for i in range(len(panel)):
            w.writerow([panel.unit_id[i], int(panel.period[i]), panel.adm2[i], panel.country[i],
                        int(panel.treated[i]), _fmt(panel.outcome[i]), refs[i]]
                       + [_fmt(v) for v in panel.covariates[i]])


def read_panel_csv(path, tiles=None, funder: str = "", sector: str = "") -> PanelSlice:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if tuple(header[:len(CORE_COLUMNS)]) != CORE_COLUMNS:
            raise DataError(f"{path}: panel header must start with {CORE_COLUMNS}")
        rows = list(r)
    names = header[len(CORE_COLUMNS):]
    cols = list(zip(*rows)) if rows else [[] for _ in header]
    X = np.array([[float(v) for v in row[len(CORE_COLUMNS):]] for row in rows]).reshape(len(rows), len(names))
    return PanelSlice(
        np.asarray(cols[0]), np.asarray(cols[1], dtype=int), np.asarray(cols[2]), np.asarray(cols[3]),
        np.asarray(cols[4], dtype=int), np.array([float(v) if v else np.nan for v in cols[5]]),
        X, names, np.asarray(cols[6]), tiles, funder, sector)


def read_projects_csv(path) -> list:
    """Projects CSV; a sector_code like ``110;210`` yields one record per sector."""
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            for sector in str(row["sector_code"]).replace("|", ";").split(";"):
                out.append(ProjectRecord(row["project_id"], row["funder"], int(sector), float(row["lat"]),
                                         float(row["lon"]), int(row["precision"]),
                                         row.get("adm2_id") or None, int(row["year"])))
    return out


def read_neighborhoods_csv(path) -> list:
    with open(path, newline="") as fh:
        return [Neighborhood(row["unit_id"], float(row["lat"]), float(row["lon"]), row["country"],
                             row.get("adm1_id", ""), row["adm2_id"]) for row in csv.DictReader(fh)]


def write_neighborhoods_csv(path, units):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["unit_id", "lat", "lon", "country", "adm1_id", "adm2_id"])
        for u in units:
            w.writerow([u.unit_id, repr(float(u.lat)), repr(float(u.lon)), u.country, u.adm1_id, u.adm2_id])


def read_outcomes_csv(path) -> dict:
    with open(path, newline="") as fh:
        return {(row["unit_id"], int(row["period"])): (float(row["iwi"]) if row["iwi"] else np.nan)
                for row in csv.DictReader(fh)}


def write_outcomes_csv(path, outcomes: dict):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["unit_id", "period", "iwi"])
        for (u, t), y in sorted(outcomes.items(), key=lambda kv: (str(kv[0][0]), kv[0][1])):
            w.writerow([u, t, _fmt(float(y))])


def read_covariates_csv(path):
    """unit_id, period, <covariates...> -> (mapping, names)."""
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        names = header[2:]
        data = {(row[0], int(row[1])): [float(v) if v else np.nan for v in row[2:]] for row in r}
    return data, names


__all__ = ["PanelSlice", "PanelRejected", "build_panel", "validate_panel", "coverage_matrix",
           "DirectoryTileStore", "tile_ref", "PERIOD_START"]
