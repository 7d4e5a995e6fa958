"""Tabular covariate transforms, fixed-effect encodings and fold standardization."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .validation import check_matrix

log = logging.getLogger(__name__)

# first calendar year of each 3-year period; -1 is the pre-study image window
# and 4 the post-study outcome window
PERIOD_START = {-1: 1999, 0: 2002, 1: 2005, 2: 2008, 3: 2011, 4: 2014}
STUDY_PERIODS = (0, 1, 2, 3)


class CovariateDomainError(ValueError):
    pass


class IndicatorValidationError(ValueError):
    pass


class LookaheadError(ValueError):
    """A covariate draws on data from its own period or later."""


def period_years(period: int) -> tuple:
    start = PERIOD_START[period]
    return (start, start + 1, start + 2)


def prior_years(period: int) -> tuple:
    """The three calendar years immediately preceding ``period``."""
    start = PERIOD_START[period]
    return (start - 3, start - 2, start - 1)


def period_of_year(year: int) -> int:
    for p, start in PERIOD_START.items():
        if start <= year < start + 3:
            return p
    raise ValueError(f"year {year} outside the supported periods")


def log1p_transform(x):
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < 0):
        raise CovariateDomainError("log1p transform requires nonnegative input")
    out = np.log1p(x)
    return float(out) if out.ndim == 0 else out


def aggregate_period(series: dict, period: int, mode: str = "mean", reasons: list | None = None) -> float:
    """Aggregate the three yearly values preceding ``period``.

    ``series`` maps calendar year to value. ``mode`` is ``"mean"`` for stocks
    and ``"sum"`` for flows. Incomplete coverage gives NaN; the reason is
    logged and appended to ``reasons`` when supplied.
    """
    if mode not in ("mean", "sum"):
        raise ValueError(f"unknown aggregation mode {mode!r}")
    years = prior_years(period)
    missing = [y for y in years if y not in series or series[y] is None
               or (isinstance(series[y], float) and math.isnan(series[y]))]
    if missing:
        msg = f"period {period}: missing years {missing}"
        log.info(msg)
        if reasons is not None:
            reasons.append(msg)
        return float("nan")
    vals = [float(series[y]) for y in years]
    return float(np.sum(vals)) if mode == "sum" else float(np.mean(vals))


@dataclass
class IndicatorContext:
    """Country/ADM1 political records for one unit."""

    unsc_member_years: set = field(default_factory=set)
    deviating_votes: dict = field(default_factory=dict)  # year -> votes against the U.S.
    leader_birthplace_years: set = field(default_factory=set)
    election_years: set = field(default_factory=set)


def indicator_covariates(context: IndicatorContext, period: int) -> dict:
    years = set(prior_years(period))
    for y, n in context.deviating_votes.items():
        if n and y not in context.unsc_member_years:
            raise IndicatorValidationError(f"deviating vote recorded in {y} without UNSC membership")
    member = bool(years & set(context.unsc_member_years))
    deviations = sum(context.deviating_votes.get(y, 0) for y in years)
    out = {
        "unsc_aligned": int(member and deviations == 0),
        "unsc_nonaligned": int(member and deviations > 0),
        "leader_birthplace": int(bool(years & set(context.leader_birthplace_years))),
        "election_year": int(bool(years & set(context.election_years))),
    }
    validate_indicators(out)
    return out


def validate_indicators(values: dict):
    if values.get("unsc_aligned") and values.get("unsc_nonaligned"):
        raise IndicatorValidationError("UNSC aligned and non-aligned indicators both set")


def check_no_lookahead(source_years, period: int, name: str = "covariate"):
    start = PERIOD_START[period]
    late = [y for y in source_years if y >= start]
    if late:
        raise LookaheadError(f"{name} for period {period} uses years {late} >= {start}")


def nearest_deposit_km(lat: float, lon: float, deposits, year: int) -> float:
    """log1p of the distance (km) to the closest deposit discovered by ``year``.

    ``deposits`` is an iterable of ``(lat, lon, discovery_year)``.
    """
    from .geo import haversine_km

    known = [(a, b) for a, b, y in deposits if y <= year]
    if not known:
        return float("nan")
    arr = np.asarray(known)
    return float(np.log1p(haversine_km(lat, lon, arr[:, 0], arr[:, 1]).min()))


# ---------------------------------------------------------------------------
# estimators
# ---------------------------------------------------------------------------

SD_FLOOR = 1e-8


class FoldStandardScaler(TransformerMixin, BaseEstimator):
    """Zero-mean, unit-variance scaling with population sd from the fit rows.

    Columns whose sd falls below ``sd_floor`` are dropped (``drop_constant``)
    and listed in ``dropped_``; otherwise they are centred only.
    """

    def __init__(self, drop_constant: bool = True, sd_floor: float = SD_FLOOR):
        self.drop_constant = drop_constant
        self.sd_floor = sd_floor

    def fit(self, X, y=None):
        X = check_matrix(X)
        self.n_features_in_ = X.shape[1]
        self.mean_ = X.mean(axis=0)
        sd = X.std(axis=0)
        constant = sd < self.sd_floor
        self.scale_ = np.where(constant, 1.0, sd)
        self.dropped_ = np.flatnonzero(constant) if self.drop_constant else np.array([], dtype=int)
        self.kept_ = np.flatnonzero(~constant) if self.drop_constant else np.arange(X.shape[1])
        if len(self.dropped_):
            log.info("dropping %d constant column(s): %s", len(self.dropped_), self.dropped_.tolist())
        return self

    def transform(self, X):
        check_is_fitted(self, "mean_")
        X = check_matrix(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} columns, got {X.shape[1]}")
        Z = (X - self.mean_) / self.scale_
        return Z[:, self.kept_]


def standardize_fit_transform(train_columns, apply_columns, drop_constant: bool = True):
    """Fit on training rows, transform both; returns (train_z, apply_z, scaler)."""
    scaler = FoldStandardScaler(drop_constant=drop_constant).fit(train_columns)
    return scaler.transform(train_columns), scaler.transform(apply_columns), scaler


OTHER = "__other__"


class FixedEffectEncoder(TransformerMixin, BaseEstimator):
    """One-hot dummies with the first category as omitted reference.

    Categories seen fewer than ``min_count`` times share one ``__other__``
    column. Columns are ordered by sorted category id. Unseen categories at
    transform time map to ``__other__`` when it exists, else to all zeros.
    """

    def __init__(self, min_count: int = 5, prefix: str = "fe"):
        self.min_count = min_count
        self.prefix = prefix

    def fit(self, categories, y=None):
        cats = np.asarray(categories).astype(str).reshape(-1)
        labels, counts = np.unique(cats, return_counts=True)
        frequent = [str(l) for l, c in zip(labels, counts) if c >= self.min_count]
        rare = [str(l) for l, c in zip(labels, counts) if c < self.min_count]
        levels = frequent + ([OTHER] if rare else [])
        if not levels:
            levels = [OTHER]
        self.reference_ = levels[0]
        self.levels_ = levels[1:]
        self.merged_ = rare
        self.index_ = {lev: i for i, lev in enumerate(self.levels_)}
        self.feature_names_ = [f"{self.prefix}_{lev}" for lev in self.levels_]
        return self

    def transform(self, categories):
        check_is_fitted(self, "levels_")
        cats = np.asarray(categories).astype(str).reshape(-1)
        out = np.zeros((len(cats), len(self.levels_)))
        known = set(self.index_) | {self.reference_}
        for r, c in enumerate(cats):
            if c not in known and c != OTHER:
                c = OTHER
            j = self.index_.get(c)
            if j is not None:
                out[r, j] = 1.0
        return out

    def get_feature_names_out(self, input_features=None):
        return np.array(self.feature_names_, dtype=object)


# ---------------------------------------------------------------------------
# schema
# ---------------------------------------------------------------------------

@dataclass
class CovariateSpec:
    name: str
    transform: str = "none"        # none | log1p | indicator
    aggregation: str = "mean"      # mean | sum | static | any | concurrent
    source: str = ""


DEFAULT_SCHEMA = [
    CovariateSpec("unsc_aligned", "indicator", "any", "unsc"),
    CovariateSpec("unsc_nonaligned", "indicator", "any", "unsc"),
    CovariateSpec("gini", "none", "mean", "gini"),
    CovariateSpec("control_of_corruption", "none", "mean", "wgi"),
    CovariateSpec("government_effectiveness", "none", "mean", "wgi"),
    CovariateSpec("political_stability", "none", "mean", "wgi"),
    CovariateSpec("regulatory_quality", "none", "mean", "wgi"),
    CovariateSpec("rule_of_law", "none", "mean", "wgi"),
    CovariateSpec("voice_accountability", "none", "mean", "wgi"),
    CovariateSpec("landsat_l8_period", "indicator", "static", "period"),
    CovariateSpec("nightlights_pc", "log1p", "mean", "nightlights"),
    CovariateSpec("pop_density", "log1p", "mean", "worldpop"),
    CovariateSpec("dist_gold", "log1p", "mean", "golddata"),
    CovariateSpec("dist_gems", "log1p", "mean", "gemstone"),
    CovariateSpec("dist_diamonds", "log1p", "mean", "diadata"),
    CovariateSpec("dist_oil", "log1p", "mean", "petrodata"),
    CovariateSpec("travel_min_city", "log1p", "static", "access2000"),
    CovariateSpec("adjacent_adm2_projects", "log1p", "concurrent", "projects"),
    CovariateSpec("funder_other_sector_projects", "log1p", "concurrent", "projects"),
    CovariateSpec("other_funder_projects", "log1p", "concurrent", "projects"),
    CovariateSpec("china_loan_projects", "none", "concurrent", "oof"),
    CovariateSpec("leader_birthplace", "indicator", "any", "plad"),
    CovariateSpec("conflict_deaths", "log1p", "sum", "ucdp"),
    CovariateSpec("disasters", "log1p", "sum", "emdat"),
    CovariateSpec("election_year", "indicator", "any", "dpi"),
]


def save_schema(path, schema):
    with open(path, "w") as fh:
        json.dump([asdict(s) for s in schema], fh, indent=2)
        fh.write("\n")


def load_schema(path) -> list:
    with open(path) as fh:
        return [CovariateSpec(**row) for row in json.load(fh)]
