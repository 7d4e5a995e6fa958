"""Synthetic worlds with known treatment effects and controllable confounding.

Each unit carries two latent confounders. ``u_visible`` is rendered into the
unit's image tiles as built-up texture (blob count and road orientation
energy); ``u_invisible`` never reaches the pixels. Treatment in each period is
Bernoulli with logit ``a0 + gamma_visible*u_visible + gamma_invisible*u_invisible``
and the outcome is ``b0 + tau*A + outcome_slope*(u_visible + u_invisible) + noise``,
clipped to [0, 100]. Tabular proxies correlate with each latent at
``proxy_strength``.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

from .geo import AdminArea, ImageTile, Neighborhood
from .panel import PanelSlice, tile_ref

log = logging.getLogger(__name__)


class WorldConfigError(ValueError):
    pass


@dataclass
class WorldConfig:
    n_units: int = 2000
    n_adm2: int = 100
    n_periods: int = 4
    tau_true: float = 5.0
    gamma_visible: float = 1.5
    gamma_invisible: float = 0.0
    image_side: int = 64
    bands: int = 5
    noise_sd: float = 5.0
    seed: int = 0
    n_countries: int = 4
    treated_share: float = 0.3
    baseline_logit: float | None = None
    outcome_base: float = 45.0
    outcome_slope: float = 6.0
    proxy_strength: float = 0.5
    n_noise_covariates: int = 2
    heterogeneity_sd: float = 0.0
    spatial_share: float = 0.5
    illumination_jitter: float = 0.25

    def validate(self):
        if self.n_units < 2 * self.n_adm2:
            raise WorldConfigError("n_units must be at least 2 * n_adm2")
        if not np.isfinite(self.tau_true):
            raise WorldConfigError("tau_true must be finite")
        if self.n_periods < 1 or self.n_periods > 4:
            raise WorldConfigError("n_periods must be in 1..4")
        if not 0 <= self.proxy_strength <= 1:
            raise WorldConfigError("proxy_strength must lie in [0, 1]")
        return self


@dataclass
class WorldTruth:
    u_visible: np.ndarray
    u_invisible: np.ndarray
    propensity: np.ndarray   # per cell
    y0: np.ndarray           # per cell, before clipping
    y1: np.ndarray
    tau_true: float
    clip_rate: float = 0.0

    def to_json(self) -> dict:
        return {"tau_true": self.tau_true, "clip_rate": self.clip_rate,
                "sample_ate": float(np.mean(self.y1 - self.y0)),
                "u_visible": self.u_visible.tolist(), "u_invisible": self.u_invisible.tolist(),
                "propensity": self.propensity.tolist()}


@dataclass
class World:
    config: WorldConfig
    units: list
    areas: list
    panel: PanelSlice
    truth: WorldTruth
    outcomes: dict = field(default_factory=dict)


def unit_rng(seed: int, unit_index: int, period: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator for one unit x period, independent of iteration order."""
    return np.random.default_rng(np.random.SeedSequence([seed, unit_index, period + 8, stream]))


def _smooth_field(rng, n_features, lat, lon, length_scale):
    w = rng.normal(0, 1.0 / length_scale, size=(n_features, 2))
    b = rng.uniform(0, 2 * np.pi, size=n_features)
    feats = np.cos(np.column_stack([lat, lon]) @ w.T + b)
    return feats @ rng.normal(size=n_features)


def _standardize(x):
    return (x - x.mean()) / (x.std() + 1e-12)


def _latent(rng, lat, lon, spatial_share):
    smooth = _standardize(_smooth_field(rng, 12, lat, lon, 1.5))
    local = rng.normal(size=len(lat))
    return _standardize(np.sqrt(spatial_share) * smooth + np.sqrt(1 - spatial_share) * local)


def _layout(cfg: WorldConfig, rng):
    cols = int(np.ceil(np.sqrt(cfg.n_adm2)))
    cell = 0.5
    lat0, lon0 = -5.0, 15.0
    areas = []
    per_country = int(np.ceil(cfg.n_adm2 / cfg.n_countries))
    for k in range(cfg.n_adm2):
        r, c = divmod(k, cols)
        s, w = lat0 + r * cell, lon0 + c * cell
        ring = [[w, s], [w + cell, s], [w + cell, s + cell], [w, s + cell], [w, s]]
        country = f"C{k // per_country:02d}"
        areas.append(AdminArea(f"A{k:04d}", country, f"{country}-R{(k % per_country) // 4:02d}", [[ring]]))
    adm_index = np.concatenate([np.arange(cfg.n_adm2).repeat(2),
                                rng.integers(0, cfg.n_adm2, size=cfg.n_units - 2 * cfg.n_adm2)])
    units = []
    for i, k in enumerate(adm_index):
        (w, s) = areas[k].rings[0][0][0]
        lat = s + rng.uniform(0.05, cell - 0.05)
        lon = w + rng.uniform(0.05, cell - 0.05)
        a = areas[k]
        units.append(Neighborhood(f"U{i:05d}", float(lat), float(lon), a.country, a.adm1_id, a.adm2_id))
    return areas, units


def _solve_baseline(cfg, index):
    def share(a0):
        return expit(a0 + index).mean() - cfg.treated_share
    return brentq(share, -30, 30)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

_BACKGROUND = np.array([0.06, 0.09, 0.05, 0.32, 0.16])
_BUILT = np.array([0.24, 0.23, 0.22, 0.20, 0.34])
_ROAD = np.array([0.18, 0.18, 0.18, 0.15, 0.26])


def blob_count(u_visible: float) -> int:
    return int(round(2 + 20 * expit(1.4 * u_visible)))


def render_tile(cfg: WorldConfig, unit_index: int, period: int, u_visible: float) -> ImageTile:
    """Procedural multiband tile whose texture encodes ``u_visible``.

    Built-up blobs (count rising with ``u_visible``) and straight road segments
    (count rising with ``u_visible``) sit on a noisy vegetation background; a
    per-tile illumination gain keeps band means from being a clean proxy.
    """
    rng = unit_rng(cfg.seed, unit_index, period)
    side, nb = cfg.image_side, cfg.bands
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    veg = 1.0 + 0.15 * rng.normal(size=(side, side))
    base = _BACKGROUND[:nb, None, None] * veg[None]
    built = np.zeros((side, side))
    scale = side / 64.0
    for _ in range(blob_count(u_visible)):
        cy, cx = rng.uniform(0, side, size=2)
        r = rng.uniform(1.5, 3.5) * scale
        built = np.maximum(built, ((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r).astype(float))
    roads = np.zeros((side, side))
    n_roads = int(round(1 + 4 * expit(1.4 * u_visible)))
    for _ in range(n_roads):
        theta = rng.uniform(0, np.pi)
        off = rng.uniform(-side / 3, side / 3)
        d = np.abs((xx - side / 2) * np.sin(theta) - (yy - side / 2) * np.cos(theta) - off)
        roads = np.maximum(roads, (d <= 0.8 * scale).astype(float))
    img = base * (1 - built - roads * (1 - built))[None]
    img += _BUILT[:nb, None, None] * built[None] + _ROAD[:nb, None, None] * (roads * (1 - built))[None]
    gain = 1.0 + cfg.illumination_jitter * rng.uniform(-1, 1)
    img = gain * img + 0.01 * rng.normal(size=img.shape)
    return ImageTile(tile_ref(f"U{unit_index:05d}", period + 1), img.astype(np.float32),
                     np.ones((side, side), bool), period)


class RenderedTileStore:
    """Lazily rendered tiles keyed by ``tile_ref``; deterministic per (seed, unit, period)."""

    def __init__(self, cfg: WorldConfig, u_visible: np.ndarray):
        self.cfg = cfg
        self.u_visible = u_visible

    def _parse(self, ref):
        unit, p = ref.rsplit("_p", 1)
        return int(unit[1:]), int(p)

    def __getitem__(self, ref) -> ImageTile:
        i, p = self._parse(ref)
        tile = render_tile(self.cfg, i, p, float(self.u_visible[i]))
        tile.tile_id = ref
        return tile

    def __contains__(self, ref):
        try:
            i, _ = self._parse(ref)
        except ValueError:
            return False
        return 0 <= i < len(self.u_visible)


# ---------------------------------------------------------------------------
# world generation
# ---------------------------------------------------------------------------

def generate_world(config: WorldConfig) -> World:
    cfg = config.validate()
    rng = np.random.default_rng(cfg.seed)
    areas, units = _layout(cfg, rng)
    lat = np.array([u.lat for u in units])
    lon = np.array([u.lon for u in units])
    u_vis = _latent(rng, lat, lon, cfg.spatial_share)
    u_inv = _latent(rng, lat, lon, cfg.spatial_share)

    n, T = cfg.n_units, cfg.n_periods
    unit_idx = np.repeat(np.arange(n), T)
    period = np.tile(np.arange(T), n)
    index = cfg.gamma_visible * u_vis[unit_idx] + cfg.gamma_invisible * u_inv[unit_idx]
    a0 = cfg.baseline_logit
    if a0 is None:
        a0 = _solve_baseline(cfg, index)
    pi = expit(a0 + index)
    if pi.mean() > 0.99 or pi.mean() < 0.01:
        suggested = _solve_baseline(cfg, index)
        raise WorldConfigError(f"degenerate assignment (mean propensity {pi.mean():.4f}); "
                               f"try baseline_logit={suggested:.3f}")
    pi = np.clip(pi, 1e-6, 1 - 1e-6)
    treated = (rng.random(n * T) < pi).astype(int)

    period_shift = np.linspace(0.0, 3.0, T)[period]
    y0 = (cfg.outcome_base + cfg.outcome_slope * (u_vis + u_inv)[unit_idx] + period_shift
          + cfg.noise_sd * rng.normal(size=n * T))
    effect = cfg.tau_true + (cfg.heterogeneity_sd * rng.normal(size=n)[unit_idx] if cfg.heterogeneity_sd else 0.0)
    y1 = y0 + effect
    y_obs = np.where(treated == 1, y1, y0)
    clipped = (y_obs < 0) | (y_obs > 100)
    y_obs = np.clip(y_obs, 0, 100)

    rho = cfg.proxy_strength
    cols = [rho * u_vis + np.sqrt(1 - rho ** 2) * rng.normal(size=n),
            rho * u_inv + np.sqrt(1 - rho ** 2) * rng.normal(size=n)]
    names = ["proxy_visible", "proxy_invisible"]
    for j in range(cfg.n_noise_covariates):
        cols.append(rng.normal(size=n))
        names.append(f"noise_{j}")
    X = np.column_stack(cols)[unit_idx] + 0.1 * rng.normal(size=(n * T, len(cols)))

    unit_ids = np.array([units[i].unit_id for i in unit_idx])
    truth = WorldTruth(u_vis, u_inv, pi, y0, y1, cfg.tau_true, float(clipped.mean()))
    panel = PanelSlice(unit_ids, period, np.array([units[i].adm2_id for i in unit_idx]),
                       np.array([units[i].country for i in unit_idx]), treated, y_obs, X, names,
                       np.array([tile_ref(u, t) for u, t in zip(unit_ids, period)]),
                       RenderedTileStore(cfg, u_vis), "synthetic", "S", {"seed": cfg.seed})
    outcomes = {(u, int(t) + 1): float(y) for u, t, y in zip(unit_ids, period, y_obs)}
    return World(cfg, units, areas, panel, truth, outcomes)


def world_to_json(world: World) -> dict:
    return {"config": asdict(world.config), "truth": world.truth.to_json()}


def write_truth(path, world: World):
    with open(path, "w") as fh:
        json.dump(world_to_json(world), fh, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# bias ladder
# ---------------------------------------------------------------------------

@dataclass
class LadderReport:
    """Per-seed errors (estimate - tau_true) and out-of-fold AUCs by specification."""

    errors: dict
    aucs: dict
    seeds: list
    seconds: float = 0.0

    def mean_bias(self) -> dict:
        return {k: float(np.mean(v)) for k, v in self.errors.items()}

    def mean_abs_error(self) -> dict:
        return {k: float(np.mean(np.abs(v))) for k, v in self.errors.items()}

    def mc_se(self) -> dict:
        return {k: float(np.std(v, ddof=1) / np.sqrt(len(v))) if len(v) > 1 else float("nan")
                for k, v in self.errors.items()}

    def mean_auc(self) -> dict:
        return {k: float(np.mean(v)) for k, v in self.aucs.items()}

    def table(self) -> str:
        bias, mae, se, auc_ = self.mean_bias(), self.mean_abs_error(), self.mc_se(), self.mean_auc()
        lines = [f"{'spec':<12} {'|bias|':>8} {'bias':>8} {'mc_se':>8} {'mean|err|':>10} {'auc':>7}"]
        for k in self.errors:
            a = f"{auc_[k]:.3f}" if k in auc_ else "-"
            lines.append(f"{k:<12} {abs(bias[k]):>8.3f} {bias[k]:>8.3f} {se[k]:>8.3f} {mae[k]:>10.3f} {a:>7}")
        return "\n".join(lines)


def bias_ladder(world: WorldConfig, estimator, seeds, n_folds: int = 5, clip=(0.01, 0.99),
                specifications=("a_diffmeans", "b_x_fe", "c1_m", "c2_m_x_fe"),
                include_true: bool = True, progress=None) -> LadderReport:
    """Estimate every specification on fresh worlds and record error against tau_true.

    ``estimator`` is an unfitted propensity classifier (for example
    FusionPropensityClassifier) configured for the world's image geometry; the
    tabular-only specification reuses it with ``image_bands=0``. Each seed's
    world and fold split use that seed. ``"true"`` scores the Hájek estimator
    on the generating propensities.
    """
    from sklearn.base import clone

    from .analysis import auc
    from .estimator import hajek_ate, run_specifications
    from .propensity import cross_fit_propensity

    t0 = time.perf_counter()
    keys = list(specifications) + (["true"] if include_true else [])
    errors = {k: [] for k in keys}
    aucs = {k: [] for k in keys if k != "a_diffmeans"}
    seeds = list(seeds)
    for seed in seeds:
        w = generate_world(WorldConfig(**{**asdict(world), "seed": int(seed)}))
        pan = w.panel
        y = pan.treated
        needs_pixels = any(s.startswith("c") for s in specifications)
        pixels = pan.pixels() if needs_pixels else None
        props = {}
        for spec in specifications:
            if spec == "a_diffmeans":
                continue
            est = clone(estimator)
            if spec == "b_x_fe" and "image_bands" in est.get_params():
                est.set_params(image_bands=0)
            cf = cross_fit_propensity(est, pan.design(spec, pixels), y, pan.adm2, n_folds,
                                      clip=clip, seed=int(seed))
            props[spec] = cf.p_hat
            aucs[spec].append(auc(cf.p_hat, y))
        ests, _ = run_specifications(pan, props, clip=clip, specifications=specifications)
        for e in ests:
            errors[e.specification].append(e.ate - w.config.tau_true)
        if include_true:
            errors["true"].append(hajek_ate(pan.outcome, y, w.truth.propensity) - w.config.tau_true)
            aucs["true"].append(auc(w.truth.propensity, y))
        if progress is not None:
            progress(seed, {k: v[-1] for k, v in errors.items()})
    return LadderReport({k: np.asarray(v) for k, v in errors.items()},
                        {k: np.asarray(v) for k, v in aucs.items()}, seeds, time.perf_counter() - t0)
