"""Hájek inverse-probability-weighted ATEs with influence-function uncertainty."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import norm
from sklearn.base import BaseEstimator

from .validation import check_binary, check_vector

log = logging.getLogger(__name__)

DEFAULT_CLIP = (0.01, 0.99)
SPEC_LABELS = {
    "a_diffmeans": "(a) Diff-in-means",
    "b_x_fe": "(b) X+FE",
    "c1_m": "(c1) M",
    "c2_m_x_fe": "(c2) M+X+FE",
}


class DegenerateArmError(ValueError):
    pass


class ClusteringError(ValueError):
    pass


def _arms(A):
    treated = A == 1
    if treated.all() or not treated.any():
        raise DegenerateArmError("both treated and control units are required")
    return treated


def _check(Y, A, p=None):
    Y = check_vector(Y, "outcome")
    A = check_binary(A, n=len(Y))
    if p is None:
        return Y, A
    p = check_vector(p, "propensity", n=len(Y))
    if np.any((p <= 0) | (p >= 1)):
        raise ValueError("propensities must lie strictly inside (0, 1)")
    return Y, A, p


def hajek_weights(A, p):
    """Per-arm normalized inverse-probability weights (each arm sums to 1)."""
    A = check_binary(A)
    p = check_vector(p, "propensity", n=len(A))
    treated = _arms(A)
    w = np.where(treated, 1.0 / p, 1.0 / (1.0 - p))
    w[treated] /= w[treated].sum()
    w[~treated] /= w[~treated].sum()
    return w


def hajek_ate(Y, A, p, normalize: bool = True) -> float:
    """IPW mean difference; ``normalize=False`` gives the Horvitz-Thompson form."""
    Y, A, p = _check(Y, A, p)
    treated = _arms(A)
    if not normalize:
        return float(np.mean(A * Y / p - (1 - A) * Y / (1 - p)))
    w = hajek_weights(A, p)
    return float(np.sum(w[treated] * Y[treated]) - np.sum(w[~treated] * Y[~treated]))


def diff_in_means(Y, A) -> float:
    Y, A = _check(Y, A)
    treated = _arms(A)
    return float(Y[treated].mean() - Y[~treated].mean())


def influence_values(Y, A, p) -> np.ndarray:
    """Linearization of the Hájek estimator: psi_i = n*w_i*(Y_i - mu_arm)*sign(arm)."""
    Y, A, p = _check(Y, A, p)
    treated = _arms(A)
    w = hajek_weights(A, p)
    mu1 = np.sum(w[treated] * Y[treated])
    mu0 = np.sum(w[~treated] * Y[~treated])
    n = len(Y)
    return np.where(treated, n * w * (Y - mu1), -n * w * (Y - mu0))


def ate_variance(Y, A, p, clusters=None) -> float:
    """Variance of the Hájek ATE, sum(psi^2)/n^2; clustered sums scale by G/(G-1)."""
    psi = influence_values(Y, A, p)
    n = len(psi)
    if clusters is None:
        return float(np.sum(psi ** 2) / n ** 2)
    clusters = np.asarray(clusters)
    if len(clusters) != n:
        raise ClusteringError("cluster labels do not match the sample")
    labels, inv = np.unique(clusters, return_inverse=True)
    G = len(labels)
    if G < 2:
        raise ClusteringError("cluster-robust variance needs at least 2 clusters")
    sums = np.bincount(inv, weights=psi, minlength=G)
    return float(G / (G - 1) * np.sum(sums ** 2) / n ** 2)


@dataclass
class AteEstimate:
    funder: str
    sector_code: str
    specification: str
    ate: float
    std_error: float
    ci_low: float
    ci_high: float
    n_treated: int
    n_control: int
    clip_bounds: tuple = DEFAULT_CLIP
    variance_method: str = "influence_function"

    def __post_init__(self):
        if self.n_treated < 1 or self.n_control < 1:
            raise DegenerateArmError("estimate requires both arms")

    def row(self) -> dict:
        d = asdict(self)
        lo, hi = d.pop("clip_bounds")
        d.update(clip_lo=lo, clip_hi=hi)
        return d


def estimate_ate(Y, A, p, specification="a_diffmeans", funder="", sector="", clusters=None,
                 clip=DEFAULT_CLIP, level: float = 0.95, normalize: bool = True) -> AteEstimate:
    """Point estimate, standard error and normal interval for one specification."""
    Y, A, p = _check(Y, A, p)
    ate = hajek_ate(Y, A, p, normalize=normalize)
    se = float(np.sqrt(ate_variance(Y, A, p, clusters)))
    z = norm.ppf(0.5 + level / 2)
    method = "influence_function" + ("_cluster" if clusters is not None else "")
    if not normalize:
        method += "_horvitz_thompson_point"
    return AteEstimate(funder, str(sector), specification, ate, se, ate - z * se, ate + z * se,
                       int(A.sum()), int(len(A) - A.sum()), tuple(clip), method)


class HajekIPW(BaseEstimator):
    """Estimator-style wrapper: ``fit(Y, A, propensity)`` sets ``ate_``/``std_error_``.

    Without a propensity the treated share is used, which reproduces the
    difference in means.
    """

    def __init__(self, clip=DEFAULT_CLIP, cluster: bool = False, level: float = 0.95,
                 normalize: bool = True):
        self.clip = clip
        self.cluster = cluster
        self.level = level
        self.normalize = normalize

    def fit(self, Y, A, propensity=None, groups=None):
        Y, A = _check(Y, A)
        if propensity is None:
            p = np.full(len(A), A.mean())
        else:
            p = np.clip(check_vector(propensity, "propensity", n=len(A)), *self.clip)
        est = estimate_ate(Y, A, p, clusters=groups if self.cluster else None, clip=self.clip,
                           level=self.level, normalize=self.normalize)
        self.estimate_ = est
        self.ate_ = est.ate
        self.std_error_ = est.std_error
        self.confidence_interval_ = (est.ci_low, est.ci_high)
        return self


def run_specifications(panel, propensities: dict, clip=DEFAULT_CLIP, cluster: bool = False,
                       specifications=tuple(SPEC_LABELS)) -> tuple:
    """One AteEstimate per specification over the same outcome-bearing cells.

    ``propensities`` maps specification -> out-of-fold probabilities aligned
    with the panel rows. Specifications without propensities (other than
    (a)) are skipped and listed in the second return value.
    """
    rows = panel.has_outcome
    Y, A = panel.outcome[rows], panel.treated[rows]
    groups = panel.adm2[rows] if cluster else None
    out, skipped = [], []
    for spec in specifications:
        if spec == "a_diffmeans":
            p = np.full(len(A), A.mean())
        elif propensities.get(spec) is None:
            skipped.append(spec)
            log.warning("no propensities for %s; skipped", spec)
            continue
        else:
            p = np.clip(np.asarray(propensities[spec])[rows], *clip)
        out.append(estimate_ate(Y, A, p, spec, panel.funder, panel.sector, groups, clip))
    return out, skipped
