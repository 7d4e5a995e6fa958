"""Assignment-mechanism diagnostics and ATE meta-analysis."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm, rankdata
from sklearn.base import BaseEstimator

from .validation import check_binary, check_matrix, check_vector

log = logging.getLogger(__name__)


class DegenerateError(ValueError):
    pass


class AlignmentError(ValueError):
    pass


class InsufficientDataError(ValueError):
    pass


class NoIdentificationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# AUC
# ---------------------------------------------------------------------------

def auc(scores, labels) -> float:
    """Probability a treated score beats a control score, ties counted one half."""
    scores = check_vector(scores, "scores")
    labels = check_binary(labels, n=len(scores), name="labels")
    n1 = int(labels.sum())
    n0 = len(labels) - n1
    if n1 == 0 or n0 == 0:
        raise DegenerateError("AUC needs both treated and control units")
    ranks = rankdata(scores)  # average ranks for ties
    u = ranks[labels == 1].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


# ---------------------------------------------------------------------------
# salience
# ---------------------------------------------------------------------------

@dataclass
class SalienceMatrix:
    rows: list          # covariate names
    cols: list          # sector codes
    values: np.ndarray  # (len(rows), len(cols))
    funder: str = ""
    specification: str = ""

    def __post_init__(self):
        self.rows = [str(r) for r in self.rows]
        self.cols = [str(c) for c in self.cols]
        self.values = np.asarray(self.values, dtype=float).reshape(len(self.rows), len(self.cols))
        if len(set(self.rows)) != len(self.rows) or len(set(self.cols)) != len(self.cols):
            raise ValueError("salience labels must be unique")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("salience entries must be finite")

    def reindex(self, rows, cols) -> "SalienceMatrix":
        ri = [self.rows.index(r) for r in rows]
        ci = [self.cols.index(c) for c in cols]
        return SalienceMatrix(list(rows), list(cols), self.values[np.ix_(ri, ci)],
                              self.funder, self.specification)

    @classmethod
    def from_columns(cls, columns: dict, rows, funder="", specification=""):
        """Build from {sector: salience vector over ``rows``}."""
        cols = list(columns)
        vals = np.column_stack([np.asarray(columns[c], float) for c in cols]) if cols else np.zeros((len(rows), 0))
        return cls(list(rows), cols, vals, funder, specification)


def salience_delta(with_images: SalienceMatrix, tabular_only: SalienceMatrix) -> SalienceMatrix:
    """Entrywise ``|with_images| - |tabular_only|`` on matched labels."""
    a, b = with_images, tabular_only
    if set(a.rows) != set(b.rows) or set(a.cols) != set(b.cols):
        raise AlignmentError(
            f"row differences {sorted(set(a.rows) ^ set(b.rows))}, "
            f"column differences {sorted(set(a.cols) ^ set(b.cols))}")
    b = b.reindex(a.rows, a.cols)
    return SalienceMatrix(a.rows, a.cols, np.abs(a.values) - np.abs(b.values), a.funder,
                          f"|{a.specification}|-|{b.specification}|")


# ---------------------------------------------------------------------------
# canonical correlation
# ---------------------------------------------------------------------------

def _standardize_columns(M):
    M = M - M.mean(axis=0)
    sd = M.std(axis=0)
    return M / np.where(sd > 1e-12, sd, 1.0)


def _inv_sqrt(C):
    vals, vecs = np.linalg.eigh(C)
    vals = np.where(vals > 1e-14, vals, np.inf)
    return (vecs / np.sqrt(vals)) @ vecs.T


class RegularizedCCA(BaseEstimator):
    """Canonical correlations with ridge ``ridge`` added to both within-set covariances.

    Rows are observations (sectors). Columns of each block are standardized
    before fitting.
    """

    def __init__(self, ridge: float = 1e-3, min_rows: int = 3):
        self.ridge = ridge
        self.min_rows = min_rows

    def fit(self, A, B):
        A, B = check_matrix(A), check_matrix(B)
        if len(A) != len(B):
            raise AlignmentError("blocks must share rows")
        if len(A) < self.min_rows:
            raise InsufficientDataError(f"need at least {self.min_rows} shared rows, got {len(A)}")
        A, B = _standardize_columns(A), _standardize_columns(B)
        n = len(A)
        cxx = A.T @ A / n + self.ridge * np.eye(A.shape[1])
        cyy = B.T @ B / n + self.ridge * np.eye(B.shape[1])
        cxy = A.T @ B / n
        wx, wy = _inv_sqrt(cxx), _inv_sqrt(cyy)
        u, s, vt = np.linalg.svd(wx @ cxy @ wy)
        self.correlations_ = np.clip(s, 0.0, 1.0)
        self.x_weights_ = wx @ u
        self.y_weights_ = wy @ vt.T
        return self


def leading_canonical_correlation(A, B, ridge: float = 1e-3) -> float:
    return float(RegularizedCCA(ridge=ridge).fit(A, B).correlations_[0])


# ---------------------------------------------------------------------------
# meta-regression
# ---------------------------------------------------------------------------

INGREDIENTS = ("x", "fe", "m")
COMBINATIONS = (("x",), ("fe",), ("m",), ("m", "x"), ("m", "fe"), ("m", "x", "fe"))


def spec_ingredients(specification: str) -> frozenset:
    """``"c2_m_x_fe"`` -> {m, x, fe}; ``"a_diffmeans"`` -> {}."""
    return frozenset(t for t in str(specification).lower().split("_") if t in INGREDIENTS)


@dataclass
class OlsResult:
    names: list
    coef: np.ndarray
    std_error: np.ndarray
    r2: float
    adj_r2: float
    n: int
    dropped: list = field(default_factory=list)
    residuals: np.ndarray | None = None

    def table(self, title: str = "") -> str:
        width = max([len(n) for n in self.names] + [9])
        lines = [title] if title else []
        lines.append(f"{'term':<{width}}  {'coef':>10}  {'se':>10}")
        for n, c, s in zip(self.names, self.coef, self.std_error):
            lines.append(f"{n:<{width}}  {c:>10.4f}  {s:>10.4f}")
        lines.append(f"n = {self.n}   R2 = {self.r2:.4f}   adj. R2 = {self.adj_r2:.4f}")
        if self.dropped:
            lines.append(f"dropped (aliased): {', '.join(self.dropped)}")
        return "\n".join(lines)


def _independent_columns(X, names, tol=1e-10):
    keep, dropped = [], []
    for j in range(X.shape[1]):
        cand = keep + [j]
        if np.linalg.matrix_rank(X[:, cand], tol=tol * max(1.0, np.abs(X).max())) == len(cand):
            keep.append(j)
        else:
            dropped.append(names[j])
    return keep, dropped


def ols(X, y, names) -> OlsResult:
    """OLS with analytic (homoskedastic) SEs; aliased columns dropped in order."""
    X, y = check_matrix(X), check_vector(y, "y", n=len(X))
    keep, dropped = _independent_columns(X, names)
    if dropped:
        log.info("dropping aliased regressors: %s", dropped)
    Xk = X[:, keep]
    coef, *_ = np.linalg.lstsq(Xk, y, rcond=None)
    resid = y - Xk @ coef
    n, k = Xk.shape
    rss = float(resid @ resid)
    tss = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - rss / tss if tss > 0 else float("nan")
    dof = n - k
    adj = 1.0 - (1.0 - r2) * (n - 1) / dof if dof > 0 else float("nan")
    sigma2 = rss / dof if dof > 0 else float("nan")
    se = np.sqrt(np.clip(np.diag(np.linalg.pinv(Xk.T @ Xk)) * sigma2, 0, None))
    return OlsResult([names[j] for j in keep], coef, se, r2, adj, n, dropped, resid)


def _funder_block(funders):
    levels = sorted(set(funders))
    cols = [np.array([f == lev for f in funders], float) for lev in levels[1:]]
    return cols, [f"funder[{lev}]" for lev in levels[1:]]


def meta_design(estimates, model: int = 1):
    """Design matrix for the ATE-level meta-regression.

    Model 1: intercept, has_x, has_fe, has_m, funder dummies.
    Model 2: intercept, one dummy per ingredient combination, funder dummies.
    """
    specs = [spec_ingredients(e.specification) for e in estimates]
    cols = [np.ones(len(estimates))]
    names = ["intercept"]
    if model == 1:
        for ing in ("x", "fe", "m"):
            cols.append(np.array([ing in s for s in specs], float))
            names.append(f"has_{ing}")
    else:
        for combo in COMBINATIONS:
            cols.append(np.array([s == frozenset(combo) for s in specs], float))
            names.append("+".join(c.upper() for c in combo))
    fcols, fnames = _funder_block([e.funder for e in estimates])
    return np.column_stack(cols + fcols), names + fnames


def meta_regress_ate(estimates, model: int = 1, weighted: bool = False) -> OlsResult:
    """Regress ATE levels on specification ingredients with funder intercepts."""
    estimates = list(estimates)
    per_cell = {}
    for e in estimates:
        per_cell.setdefault((e.funder, e.sector_code), set()).add(e.specification)
    if any(len(v) < 2 for v in per_cell.values()):
        log.warning("some funder x sector cells have fewer than 2 specifications")
    X, names = meta_design(estimates, model)
    y = np.array([e.ate for e in estimates])
    if weighted:
        w = 1.0 / np.sqrt(np.array([max(e.std_error, 1e-12) ** 2 for e in estimates]))
        X, y = X * w[:, None], y * w
    return ols(X, y, names)


# ---------------------------------------------------------------------------
# two-way fixed effects
# ---------------------------------------------------------------------------

@dataclass
class TwfeResult:
    beta: float
    clustered_se: float
    ci: tuple
    n_units: int
    n_switchers: int
    cluster_count: int
    iterations: int = 0

    def __post_init__(self):
        if self.n_switchers > self.n_units or not np.isfinite(self.beta):
            raise ValueError("invalid TWFE result")


def two_way_demean(values, unit_codes, period_codes, tol: float = 1e-10, max_iter: int = 10_000):
    """Alternating projections onto unit- and period-demeaned space.

    Stops when the largest change in any cell falls below ``tol``.
    """
    x = np.asarray(values, dtype=np.float64).copy()
    nu, nt = unit_codes.max() + 1, period_codes.max() + 1
    cu = np.bincount(unit_codes, minlength=nu)
    ct = np.bincount(period_codes, minlength=nt)
    for it in range(1, max_iter + 1):
        prev = x
        x = x - (np.bincount(unit_codes, weights=x, minlength=nu) / cu)[unit_codes]
        x = x - (np.bincount(period_codes, weights=x, minlength=nt) / ct)[period_codes]
        if np.max(np.abs(x - prev)) < tol:
            return x, it
    log.warning("two-way demeaning did not converge in %d iterations", max_iter)
    return x, max_iter


def twfe(y, treated, unit, period, cluster, level: float = 0.95) -> TwfeResult:
    """Y_it = alpha_i + lambda_t + beta*A_it with cluster-robust SE (G/(G-1) factor)."""
    y = check_vector(y, "outcome")
    A = check_binary(treated, n=len(y)).astype(float)
    _, u = np.unique(np.asarray(unit), return_inverse=True)
    _, t = np.unique(np.asarray(period), return_inverse=True)
    labels, g = np.unique(np.asarray(cluster), return_inverse=True)
    if t.max() + 1 < 2:
        raise NoIdentificationError("TWFE needs at least 2 periods")
    if len(labels) < 2:
        raise NoIdentificationError("TWFE needs at least 2 clusters")
    nu = u.max() + 1
    lo = np.full(nu, np.inf)
    hi = np.full(nu, -np.inf)
    np.minimum.at(lo, u, A)
    np.maximum.at(hi, u, A)
    switchers = int(np.sum(hi > lo))
    if switchers == 0:
        raise NoIdentificationError("no unit switches treatment status")
    ad, it_a = two_way_demean(A, u, t)
    yd, it_y = two_way_demean(y, u, t)
    sxx = float(ad @ ad)
    if sxx < 1e-12:
        raise NoIdentificationError("treatment has no within variation")
    beta = float(ad @ yd) / sxx
    e = yd - beta * ad
    G = len(labels)
    scores = np.bincount(g, weights=ad * e, minlength=G)
    var = G / (G - 1) * float(scores @ scores) / sxx ** 2
    se = float(np.sqrt(var))
    z = norm.ppf(0.5 + level / 2)
    return TwfeResult(beta, se, (beta - z * se, beta + z * se), int(nu), switchers, G, max(it_a, it_y))


class TwoWayFixedEffects(BaseEstimator):
    def __init__(self, level: float = 0.95):
        self.level = level

    def fit(self, y, treated, unit, period, groups):
        self.result_ = twfe(y, treated, unit, period, groups, self.level)
        self.coef_ = self.result_.beta
        self.std_error_ = self.result_.clustered_se
        return self
