"""Command-line pipeline: simulate, build-panel, train, estimate, analyze, plot, report.

Every stage reads a TOML run config (``--config``), applies ``--set key=value``
overrides, archives the effective config in the output directory and records
each file it writes, with its SHA-256, in ``manifest.json``. A stage refuses
to run when an upstream file no longer matches the hash in the manifest.

Exit codes: 0 success, 2 validation error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import html
import json
import logging
import os
import sys
from dataclasses import fields

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import tensor as T
from .analysis import (AlignmentError, DegenerateError, InsufficientDataError, NoIdentificationError,
                       SalienceMatrix, auc, leading_canonical_correlation, meta_regress_ate,
                       salience_delta, twfe)
from .estimator import AteEstimate, DegenerateArmError, run_specifications
from .geo import adm2_geojson, load_adm2_geojson, spatial_join_adjacent_adm2, write_tile
from .panel import (DataError, DirectoryTileStore, PanelRejected, build_panel, read_covariates_csv,
                    read_neighborhoods_csv, read_outcomes_csv, read_panel_csv, read_projects_csv,
                    validate_panel, write_neighborhoods_csv, write_outcomes_csv, write_panel_csv)
from .plots import ate_interval_chart, auc_bar_chart
from .propensity import (DivergenceError, FoldDegenerateError, FusionPropensityClassifier,
                         cross_fit_propensity)
from .simulator import WorldConfig, WorldConfigError, generate_world, write_truth

log = logging.getLogger("geocausal")

EXIT_OK, EXIT_VALIDATION, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
PROPENSITY_SPECS = ("b_x_fe", "c1_m", "c2_m_x_fe")

DEFAULTS = {
    "seed": 0,
    "output_dir": "run",
    "workers": 1,
    "specifications": ["a_diffmeans", "b_x_fe", "c1_m", "c2_m_x_fe"],
    "simulate": {"n_units": 2000, "n_adm2": 100, "n_periods": 2, "image_side": 32,
                 "gamma_visible": 1.5, "gamma_invisible": 0.0, "tau_true": 5.0},
    "data": {"panel": "", "tiles": "", "neighborhoods": "", "projects": "", "outcomes": "",
             "covariates": "", "adm2": "", "funders": [], "sectors": [], "min_treated": 100},
    "model": {"patch_size": 8, "embed_dim": 32, "num_layers": 2, "num_heads": 4,
              "dropout_rate": 0.1, "drop_path_rate": 0.1, "mlp_ratio": 2},
    "train": {"epochs": 8, "batch_size": 32, "learning_rate": 0.005, "momentum": 0.9,
              "weight_decay": 0.003, "folds": 5, "clip_lo": 0.01, "clip_hi": 0.99},
    "estimate": {"cluster": False},
    "analyze": {"cca_ridge": 1e-3},
}


class ValidationError(ValueError):
    pass


class StaleManifestError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_override(config: dict, assignment: str) -> dict:
    """``train.epochs=3`` sets config["train"]["epochs"] = 3 (values parsed as TOML)."""
    if "=" not in assignment:
        raise ValidationError(f"override {assignment!r} is not key=value")
    key, value = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = config
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ValidationError(f"override {key!r} descends into a non-table value")
    node[parts[-1]] = _parse_value(value.strip())
    return config


def load_config(path=None, overrides=()) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        try:
            with open(path, "rb") as fh:
                cfg = _merge(cfg, tomllib.load(fh))
        except FileNotFoundError:
            raise ValidationError(f"config file not found: {path}")
        except tomllib.TOMLDecodeError as exc:
            raise ValidationError(f"{path}: {exc}")
        base = os.path.dirname(os.path.abspath(path))
        for k, v in cfg["data"].items():
            if isinstance(v, str) and v and not os.path.isabs(v):
                cfg["data"][k] = os.path.join(base, v)
    for o in overrides:
        apply_override(cfg, o)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict):
    if not isinstance(cfg.get("seed"), int):
        raise ValidationError("seed is mandatory and must be an integer")
    unknown = set(cfg["simulate"]) - {f.name for f in fields(WorldConfig)}
    if unknown:
        raise ValidationError(f"unknown simulate keys: {sorted(unknown)}")
    tr = cfg["train"]
    if not 0 < tr["clip_lo"] < tr["clip_hi"] < 1:
        raise ValidationError("clip bounds must satisfy 0 < clip_lo < clip_hi < 1")
    if int(tr["folds"]) < 2:
        raise ValidationError("folds must be at least 2")
    bad = set(cfg["specifications"]) - {"a_diffmeans", *PROPENSITY_SPECS}
    if bad:
        raise ValidationError(f"unknown specifications: {sorted(bad)}")
    for k, v in cfg["data"].items():
        if k in ("funders", "sectors", "min_treated") or not v:
            continue
        if not os.path.exists(v):
            raise ValidationError(f"data.{k} path does not exist: {v}")
    if int(cfg.get("workers", 1)) < 1:
        raise ValidationError("workers must be at least 1")


def effective_config(cfg: dict) -> dict:
    """Archived form: the output directory is where the archive lives, so it is left out."""
    out = copy.deepcopy(cfg)
    out.pop("output_dir", None)
    return out


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Manifest:
    """``manifest.json``: content hashes of every emitted file, grouped by stage."""

    def __init__(self, root):
        self.root = root
        self.path = os.path.join(root, "manifest.json")
        self.data = {"files": {}, "stages": {}}
        if os.path.exists(self.path):
            with open(self.path) as fh:
                self.data = json.load(fh)

    def rel(self, path) -> str:
        return os.path.relpath(path, self.root).replace(os.sep, "/")

    def check_inputs(self, paths):
        """Refuse when a recorded file is missing or its hash changed."""
        problems = []
        for p in paths:
            r = self.rel(p)
            recorded = self.data["files"].get(r)
            if not os.path.exists(p):
                problems.append(f"  missing  {r}")
            elif recorded is not None and recorded != sha256_file(p):
                problems.append(f"  changed  {r}\n    manifest {recorded}\n    on disk  {sha256_file(p)}")
        if problems:
            raise StaleManifestError("upstream artifacts do not match the manifest:\n" + "\n".join(problems))

    def record(self, stage: str, outputs, inputs=()):
        old = self.data["stages"].get(stage, {}).get("outputs", [])
        for r in old:
            self.data["files"].pop(r, None)
        outs = sorted(self.rel(p) for p in outputs)
        for r in outs:
            self.data["files"][r] = sha256_file(os.path.join(self.root, r))
        self.data["stages"][stage] = {
            "inputs": {self.rel(p): sha256_file(p) for p in sorted(inputs) if os.path.exists(p)},
            "outputs": outs}
        self.data["files"] = dict(sorted(self.data["files"].items()))
        self.data["stages"] = dict(sorted(self.data["stages"].items()))
        with open(self.path, "w") as fh:
            json.dump(self.data, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _out(cfg) -> str:
    root = cfg["output_dir"]
    try:
        os.makedirs(root, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {root}: {exc.strerror}") from exc
    if not os.access(root, os.W_OK):
        raise OSError(f"output directory is not writable: {root}")
    return root


def _archive_config(cfg, root, stage) -> str:
    path = os.path.join(root, "config", f"{stage}.json")
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w") as fh:
        json.dump(effective_config(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _write_csv(path, header, rows):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_cell(v) for v in r])


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return "" if np.isnan(v) else repr(float(v))
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


def _read_csv(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _pair_name(funder, sector) -> str:
    return f"{funder}__{sector}"


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def cmd_simulate(cfg) -> list:
    root = _out(cfg)
    wc = WorldConfig(**{**cfg["simulate"], "seed": cfg["seed"]})
    world = generate_world(wc)
    sim = os.path.join(root, "simulate")
    tiles = os.path.join(sim, "tiles")
    os.makedirs(tiles, exist_ok=True)
    outputs = []
    p = os.path.join(sim, "neighborhoods.csv")
    write_neighborhoods_csv(p, world.units)
    outputs.append(p)
    p = os.path.join(sim, "adm2.geojson")
    with open(p, "w") as fh:
        json.dump(adm2_geojson(world.areas), fh, sort_keys=True)
        fh.write("\n")
    outputs.append(p)
    p = os.path.join(sim, "outcomes.csv")
    write_outcomes_csv(p, world.outcomes)
    outputs.append(p)
    p = os.path.join(sim, "panel.csv")
    write_panel_csv(p, world.panel)
    outputs.append(p)
    for ref in world.panel.tile_refs:
        tp = os.path.join(tiles, f"{ref}.gctl")
        write_tile(tp, world.panel.tiles[ref])
        outputs.append(tp)
    p = os.path.join(sim, "truth.json")
    write_truth(p, world)
    outputs.append(p)
    outputs.append(_archive_config(cfg, root, "simulate"))
    Manifest(root).record("simulate", outputs)
    log.info("simulated %d cells (%d treated) into %s", len(world.panel), world.panel.treated.sum(), sim)
    return outputs


def _panel_inputs(cfg, root):
    d = cfg["data"]
    if d["projects"]:
        return "raw", [d[k] for k in ("neighborhoods", "projects", "outcomes", "covariates", "adm2") if d[k]]
    panel = d["panel"] or os.path.join(root, "simulate", "panel.csv")
    return "panel", [panel]


def cmd_build_panel(cfg) -> list:
    root = _out(cfg)
    man = Manifest(root)
    kind, inputs = _panel_inputs(cfg, root)
    man.check_inputs(inputs)
    d = cfg["data"]
    min_treated = int(d.get("min_treated", 100))
    panels, report = [], {"panels": {}, "rejected": {}}
    if kind == "panel":
        panel = read_panel_csv(inputs[0], funder="synthetic", sector="S")
        try:
            panels.append(validate_panel(panel, min_treated))
        except PanelRejected as exc:
            report["rejected"][_pair_name("synthetic", "S")] = {"reason": exc.reason, "detail": exc.detail}
    else:
        units = read_neighborhoods_csv(d["neighborhoods"])
        projects = read_projects_csv(d["projects"])
        outcomes = read_outcomes_csv(d["outcomes"])
        cov, names = read_covariates_csv(d["covariates"]) if d["covariates"] else (None, [])
        areas = load_adm2_geojson(d["adm2"]) if d["adm2"] else None
        adjacency = spatial_join_adjacent_adm2(areas) if areas else None
        funders = d["funders"] or sorted({p.funder for p in projects})
        for funder in funders:
            sectors = d["sectors"] or sorted({str(p.sector_code) for p in projects if p.funder == funder})
            for sector in sectors:
                try:
                    panels.append(build_panel(units, projects, outcomes, funder, sector, None, cov, names,
                                              areas, adjacency, min_treated))
                except PanelRejected as exc:
                    report["rejected"][_pair_name(funder, sector)] = {"reason": exc.reason,
                                                                      "detail": exc.detail}
    outputs = []
    for panel in panels:
        name = _pair_name(panel.funder, panel.sector)
        p = os.path.join(root, "panels", f"{name}.csv")
        os.makedirs(os.path.dirname(p), exist_ok=True)
        write_panel_csv(p, panel)
        outputs.append(p)
        report["panels"][name] = {k: v for k, v in panel.report.items()}
    p = os.path.join(root, "panels", "panel_report.json")
    os.makedirs(os.path.dirname(p), exist_ok=True)
    with open(p, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
    outputs.append(p)
    outputs.append(_archive_config(cfg, root, "build-panel"))
    man.record("build-panel", outputs, inputs)
    if not panels:
        raise DataError("no funder x sector panel passed the inclusion rules; see panel_report.json")
    return outputs


def _built_panels(root, man):
    stage = man.data["stages"].get("build-panel")
    if not stage:
        raise DataError("build-panel has not run in this output directory")
    paths = [os.path.join(root, r) for r in stage["outputs"] if r.endswith(".csv")]
    man.check_inputs(paths)
    out = []
    for p in paths:
        funder, sector = os.path.basename(p)[:-4].split("__", 1)
        out.append((p, funder, sector))
    return out


def _tile_store(cfg, root):
    tiles = cfg["data"]["tiles"] or os.path.join(root, "simulate", "tiles")
    return DirectoryTileStore(tiles) if os.path.isdir(tiles) else None


def _classifier(cfg, panel_tiles_side, image_bands) -> FusionPropensityClassifier:
    m, tr = cfg["model"], cfg["train"]
    return FusionPropensityClassifier(
        image_bands=image_bands, image_side=panel_tiles_side, epochs=int(tr["epochs"]),
        batch_size=int(tr["batch_size"]), learning_rate=float(tr["learning_rate"]),
        momentum=float(tr["momentum"]), weight_decay=float(tr["weight_decay"]),
        random_state=cfg["seed"], **m)


def checkpoint_arrays(model: FusionPropensityClassifier) -> dict:
    """Model parameters plus the fold's preprocessing statistics."""
    arrays = dict(model.model_.state_dict())
    arrays["prep.logit_offset"] = np.array([model.logit_offset_])
    if hasattr(model, "band_mean_") and model.config_.has_image:
        arrays["prep.band_mean"] = model.band_mean_
        arrays["prep.band_scale"] = model.band_scale_
    if model.scaler_ is not None:
        arrays["prep.tab_mean"] = model.scaler_.mean_
        arrays["prep.tab_scale"] = model.scaler_.scale_
        arrays["prep.tab_kept"] = np.asarray(model.scaler_.kept_, dtype=float)
    return arrays


def train_pair(cfg, root, panel_path, funder, sector) -> tuple:
    """Cross-fit every propensity specification for one funder x sector panel."""
    tiles = _tile_store(cfg, root)
    panel = read_panel_csv(panel_path, tiles, funder, sector)
    specs = [s for s in cfg["specifications"] if s in PROPENSITY_SPECS]
    pixels = side = None
    if any(s != "b_x_fe" for s in specs):
        if tiles is None:
            raise DataError("image specifications requested but no tile directory found")
        pixels = panel.pixels()
        side = tiles[panel.tile_refs[0]].side
    tr = cfg["train"]
    clip = (tr["clip_lo"], tr["clip_hi"])
    tab_names = panel.tabular()[1]
    outdir = os.path.join(root, "train", _pair_name(funder, sector))
    os.makedirs(outdir, exist_ok=True)
    outputs, prop_rows, sal_rows = [], [], []
    for spec in specs:
        est = _classifier(cfg, side or 1, 0 if spec == "b_x_fe" else int(pixels.shape[1] // side ** 2))
        X = panel.design(spec, pixels)
        cf = cross_fit_propensity(est, X, panel.treated, panel.adm2, int(tr["folds"]), clip, cfg["seed"])
        for i in range(len(panel)):
            prop_rows.append([panel.unit_id[i], int(panel.period[i]), int(cf.fold[i]), float(cf.p_hat[i]), spec])
        for k, model in enumerate(cf.models):
            p = os.path.join(outdir, f"{spec}_fold{k}.gctn")
            T.save_checkpoint(p, checkpoint_arrays(model))
            outputs.append(p)
        if spec != "c1_m":
            # out-of-fold salience: each model scored on its own validation rows, then averaged
            sal = np.zeros(len(tab_names))
            for k, model in enumerate(cf.models):
                rows = cf.fold == k
                sal += model.salience(X[rows]) * rows.sum()
            sal /= len(panel)
            sal_rows.extend([name, spec, float(v)] for name, v in zip(tab_names, sal))
    p = os.path.join(outdir, "propensities.csv")
    _write_csv(p, ["unit_id", "period", "fold", "p_hat", "specification"], prop_rows)
    outputs.append(p)
    p = os.path.join(outdir, "salience.csv")
    _write_csv(p, ["covariate", "specification", "salience"], sal_rows)
    outputs.append(p)
    return outputs


def _train_job(args):
    return train_pair(*args)


def cmd_train(cfg) -> list:
    root = _out(cfg)
    man = Manifest(root)
    pairs = _built_panels(root, man)
    jobs = [(cfg, root, p, f, s) for p, f, s in pairs]
    if int(cfg.get("workers", 1)) > 1 and len(jobs) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(int(cfg["workers"])) as ex:
            results = list(ex.map(_train_job, jobs))
    else:
        results = [_train_job(j) for j in jobs]
    outputs = [p for r in results for p in r]
    outputs.append(_archive_config(cfg, root, "train"))
    man.record("train", outputs, [p for p, _, _ in pairs])
    return outputs


def _load_propensities(path, panel) -> dict:
    index = {(u, int(t)): i for i, (u, t) in enumerate(zip(panel.unit_id, panel.period))}
    out = {}
    for row in _read_csv(path):
        spec = row["specification"]
        arr = out.setdefault(spec, np.full(len(panel), np.nan))
        arr[index[(row["unit_id"], int(row["period"]))]] = float(row["p_hat"])
    for spec, arr in out.items():
        if np.isnan(arr).any():
            raise DataError(f"{path}: {spec} lacks propensities for some panel cells")
    return out


def cmd_estimate(cfg) -> list:
    root = _out(cfg)
    man = Manifest(root)
    pairs = _built_panels(root, man)
    tr = cfg["train"]
    clip = (tr["clip_lo"], tr["clip_hi"])
    rows, inputs = [], [p for p, _, _ in pairs]
    for path, funder, sector in pairs:
        panel = read_panel_csv(path, None, funder, sector)
        prop_path = os.path.join(root, "train", _pair_name(funder, sector), "propensities.csv")
        props = {}
        if os.path.exists(prop_path):
            man.check_inputs([prop_path])
            inputs.append(prop_path)
            props = _load_propensities(prop_path, panel)
        else:
            log.warning("%s x %s: no trained propensities; only diff-in-means is estimated", funder, sector)
        ests, skipped = run_specifications(panel, props, clip, bool(cfg["estimate"]["cluster"]),
                                           tuple(cfg["specifications"]))
        for s in skipped:
            log.warning("%s x %s: specification %s skipped", funder, sector, s)
        rows.extend(e.row() for e in ests)
    header = ["funder", "sector_code", "specification", "ate", "std_error", "ci_low", "ci_high",
              "n_treated", "n_control", "clip_lo", "clip_hi", "variance_method"]
    p = os.path.join(root, "estimate", "estimates.csv")
    _write_csv(p, header, [[r[h] for h in header] for r in rows])
    outputs = [p, _archive_config(cfg, root, "estimate")]
    man.record("estimate", outputs, inputs)
    return outputs


def _read_estimates(path) -> list:
    out = []
    for r in _read_csv(path):
        out.append(AteEstimate(r["funder"], r["sector_code"], r["specification"], float(r["ate"]),
                               float(r["std_error"]), float(r["ci_low"]), float(r["ci_high"]),
                               int(r["n_treated"]), int(r["n_control"]),
                               (float(r["clip_lo"]), float(r["clip_hi"])), r["variance_method"]))
    return out


def cmd_analyze(cfg) -> list:
    root = _out(cfg)
    man = Manifest(root)
    pairs = _built_panels(root, man)
    est_path = os.path.join(root, "estimate", "estimates.csv")
    inputs = [p for p, _, _ in pairs]
    adir = os.path.join(root, "analyze")
    os.makedirs(adir, exist_ok=True)
    auc_rows, sal_rows, twfe_rows = [], [], []
    matrices = {}  # (funder, spec) -> {sector: {covariate: value}}
    for path, funder, sector in pairs:
        panel = read_panel_csv(path, None, funder, sector)
        tdir = os.path.join(root, "train", _pair_name(funder, sector))
        prop_path = os.path.join(tdir, "propensities.csv")
        if os.path.exists(prop_path):
            man.check_inputs([prop_path])
            inputs.append(prop_path)
            for spec, p in _load_propensities(prop_path, panel).items():
                try:
                    auc_rows.append([funder, sector, spec, auc(p, panel.treated), len(p)])
                except DegenerateError as exc:
                    log.warning("%s x %s %s: %s", funder, sector, spec, exc)
        sal_path = os.path.join(tdir, "salience.csv")
        if os.path.exists(sal_path):
            man.check_inputs([sal_path])
            inputs.append(sal_path)
            for r in _read_csv(sal_path):
                v = float(r["salience"])
                sal_rows.append([funder, sector, r["specification"], r["covariate"], v])
                matrices.setdefault((funder, r["specification"]), {}).setdefault(sector, {})[r["covariate"]] = v
        ok = panel.has_outcome
        try:
            res = twfe(panel.outcome[ok], panel.treated[ok], panel.unit_id[ok], panel.period[ok], panel.adm2[ok])
            twfe_rows.append([funder, sector, res.beta, res.clustered_se, res.ci[0], res.ci[1],
                              res.n_units, res.n_switchers, res.cluster_count])
        except NoIdentificationError as exc:
            log.warning("%s x %s: TWFE not identified (%s)", funder, sector, exc)
    outputs = []
    p = os.path.join(adir, "auc.csv")
    _write_csv(p, ["funder", "sector", "spec", "auc", "n_out_of_sample"], auc_rows)
    outputs.append(p)
    p = os.path.join(adir, "salience.csv")
    _write_csv(p, ["funder", "sector", "spec", "covariate", "salience"], sal_rows)
    outputs.append(p)

    # salience deltas |M+X+FE| - |X+FE| per funder
    delta_rows = []
    deltas = {}
    for (funder, spec), by_sector in sorted(matrices.items()):
        if spec != "c2_m_x_fe" or (funder, "b_x_fe") not in matrices:
            continue
        a = _salience_matrix(by_sector, funder, spec)
        b = _salience_matrix(matrices[(funder, "b_x_fe")], funder, "b_x_fe")
        try:
            d = salience_delta(a, b)
        except AlignmentError as exc:
            log.warning("%s: salience delta skipped (%s)", funder, exc)
            continue
        deltas[funder] = d
        for i, cov in enumerate(d.rows):
            for j, sec in enumerate(d.cols):
                delta_rows.append([funder, sec, cov, d.values[i, j]])
    p = os.path.join(adir, "salience_delta.csv")
    _write_csv(p, ["funder", "sector", "covariate", "delta"], delta_rows)
    outputs.append(p)

    p = os.path.join(adir, "cca.json")
    outputs.append(p)
    _write_cca(p, deltas, float(cfg["analyze"]["cca_ridge"]))

    p = os.path.join(adir, "meta_regression.txt")
    if os.path.exists(est_path):
        man.check_inputs([est_path])
        inputs.append(est_path)
        ests = _read_estimates(est_path)
        if len({e.specification for e in ests}) >= 2:
            text = "\n\n".join(meta_regress_ate(ests, model=m).table(f"Model {m}") for m in (1, 2))
        else:
            text = "meta-regression needs estimates from at least two specifications"
    else:
        text = "no estimates available"
    with open(p, "w") as fh:
        fh.write(text + "\n")
    outputs.append(p)

    p = os.path.join(adir, "twfe.csv")
    _write_csv(p, ["funder", "sector", "beta", "clustered_se", "ci_low", "ci_high", "n_units",
                   "n_switchers", "cluster_count"], twfe_rows)
    outputs.append(p)
    outputs.append(_archive_config(cfg, root, "analyze"))
    man.record("analyze", outputs, inputs)
    return outputs


def _salience_matrix(by_sector: dict, funder, spec) -> SalienceMatrix:
    sectors = sorted(by_sector)
    rows = sorted(set().union(*[set(v) for v in by_sector.values()]))
    vals = np.array([[by_sector[s].get(r, 0.0) for s in sectors] for r in rows])
    return SalienceMatrix(rows, sectors, vals, funder, spec)


def _write_cca(path, deltas: dict, ridge: float):
    """Leading canonical correlation between the first two funders' delta matrices."""
    result = {"value": None, "lambda": ridge, "sectors_used": [], "funders": sorted(deltas)}
    funders = sorted(deltas)
    if len(funders) >= 2:
        a, b = deltas[funders[0]], deltas[funders[1]]
        shared = sorted(set(a.cols) & set(b.cols))
        result["sectors_used"] = shared
        # rows of the CCA are sectors; columns are each funder's covariates
        A = a.values[:, [a.cols.index(s) for s in shared]].T
        B = b.values[:, [b.cols.index(s) for s in shared]].T
        try:
            result["value"] = leading_canonical_correlation(A, B, ridge)
        except InsufficientDataError as exc:
            result["reason"] = str(exc)
    else:
        result["reason"] = "CCA needs salience deltas for two funders"
    with open(path, "w") as fh:
        json.dump(result, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_plot(cfg) -> list:
    root = _out(cfg)
    man = Manifest(root)
    est_path = os.path.join(root, "estimate", "estimates.csv")
    auc_path = os.path.join(root, "analyze", "auc.csv")
    inputs, outputs = [], []
    pdir = os.path.join(root, "plot")
    os.makedirs(pdir, exist_ok=True)
    if os.path.exists(est_path):
        man.check_inputs([est_path])
        inputs.append(est_path)
        rows = [dict(r, sector=r["sector_code"]) for r in _read_csv(est_path)]
        p = os.path.join(pdir, "ate_by_specification.svg")
        with open(p, "w") as fh:
            fh.write(ate_interval_chart(rows))
        outputs.append(p)
    if os.path.exists(auc_path):
        man.check_inputs([auc_path])
        inputs.append(auc_path)
        rows = [dict(r, specification=r["spec"]) for r in _read_csv(auc_path)]
        p = os.path.join(pdir, "auc_by_specification.svg")
        with open(p, "w") as fh:
            fh.write(auc_bar_chart(rows))
        outputs.append(p)
    if not outputs:
        raise DataError("nothing to plot: run estimate and analyze first")
    outputs.append(_archive_config(cfg, root, "plot"))
    man.record("plot", outputs, inputs)
    return outputs


def _html_table(path) -> str:
    rows = _read_csv(path)
    if not rows:
        return "<p>(empty)</p>"
    head = "".join(f"<th>{html.escape(h)}</th>" for h in rows[0])
    body = "".join("<tr>" + "".join(f"<td>{html.escape(str(v))}</td>" for v in r.values()) + "</tr>"
                   for r in rows)
    return f"<table><thead><tr>{head}</tr></thead><tbody>{body}</tbody></table>"


def cmd_report(cfg) -> list:
    root = _out(cfg)
    man = Manifest(root)
    files = sorted(man.data["files"])
    wanted = [r for r in files if r.startswith(("estimate/", "analyze/", "plot/"))
              and r.endswith((".csv", ".svg", ".txt", ".json"))]
    paths = [os.path.join(root, r) for r in wanted]
    man.check_inputs(paths)
    parts = ["<!DOCTYPE html>", "<html><head><meta charset='utf-8'><title>geocausal report</title>",
             "<style>body{font-family:sans-serif;max-width:1100px;margin:auto}"
             "table{border-collapse:collapse;font-size:12px;margin-bottom:1.5em}"
             "td,th{border:1px solid #ccc;padding:2px 6px}</style></head><body>",
             "<h1>Propensity-adjusted ATE report</h1>"]
    for r, p in zip(wanted, paths):
        parts.append(f"<h2>{html.escape(r)}</h2>")
        if r.endswith(".svg"):
            with open(p) as fh:
                parts.append(fh.read())
        elif r.endswith(".csv"):
            parts.append(_html_table(p))
        else:
            with open(p) as fh:
                parts.append(f"<pre>{html.escape(fh.read())}</pre>")
    parts.append("</body></html>")
    out = os.path.join(root, "report.html")
    with open(out, "w") as fh:
        fh.write("\n".join(parts) + "\n")
    man.record("report", [out, _archive_config(cfg, root, "report")], paths)
    return [out]


def cmd_run(cfg) -> list:
    """All stages in order (simulate only when no input data is configured)."""
    out = []
    d = cfg["data"]
    if not (d["panel"] or d["projects"]):
        out += cmd_simulate(cfg)
    for stage in (cmd_build_panel, cmd_train, cmd_estimate, cmd_analyze, cmd_plot, cmd_report):
        out += stage(cfg)
    return out


COMMANDS = {"simulate": cmd_simulate, "build-panel": cmd_build_panel, "train": cmd_train,
            "estimate": cmd_estimate, "analyze": cmd_analyze, "plot": cmd_plot,
            "report": cmd_report, "run": cmd_run}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="geocausal", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", help="TOML run configuration")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                    help="override a config key, e.g. --set train.epochs=3")
    ap.add_argument("--out", help="output directory (overrides output_dir)")
    ap.add_argument("--seed", type=int, help="random seed (overrides seed)")
    ap.add_argument("--workers", type=int, help="parallel funder x sector jobs")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_VALIDATION
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = list(args.set)
    if args.out:
        overrides.append(f"output_dir={json.dumps(args.out)}")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.workers is not None:
        overrides.append(f"workers={args.workers}")
    try:
        cfg = load_config(args.config, overrides)
        outputs = COMMANDS[args.command](cfg)
    except (ValidationError, WorldConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (DataError, PanelRejected, StaleManifestError, FoldDegenerateError, DegenerateArmError,
            KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DivergenceError, T.NonFiniteGradientError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    log.info("%s wrote %d files", args.command, len(outputs))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
