import csv
import json
import os
import shutil
import subprocess
import sys

import numpy as np
import pytest

from geocausal.cli import (DEFAULTS, Manifest, StaleManifestError, ValidationError, apply_override,
                           load_config, main, sha256_file)

TINY = ["--set", "simulate.n_units=200", "--set", "simulate.n_adm2=20",
        "--set", "simulate.image_side=16", "--set", "model.embed_dim=8", "--set", "model.num_layers=1",
        "--set", "model.num_heads=2", "--set", "train.epochs=1", "--set", "train.folds=3"]


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["run", "--out", str(out), "--seed", "7"] + TINY) == 0
    return out


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_run_writes_every_stage(run_dir):
    for rel in ["simulate/panel.csv", "simulate/truth.json", "simulate/adm2.geojson",
                "panels/synthetic__S.csv", "panels/panel_report.json",
                "train/synthetic__S/propensities.csv", "train/synthetic__S/salience.csv",
                "train/synthetic__S/c2_m_x_fe_fold2.gctn", "estimate/estimates.csv",
                "analyze/auc.csv", "analyze/twfe.csv", "analyze/cca.json", "analyze/meta_regression.txt",
                "plot/ate_by_specification.svg", "plot/auc_by_specification.svg", "report.html",
                "config/train.json"]:
        assert (run_dir / rel).exists(), rel
    specs = {r["specification"] for r in read_csv(run_dir / "estimate/estimates.csv")}
    assert specs == {"a_diffmeans", "b_x_fe", "c1_m", "c2_m_x_fe"}


def test_manifest_hashes_match_disk(run_dir):
    man = json.loads((run_dir / "manifest.json").read_text())
    assert man["files"]
    for rel, digest in man["files"].items():
        assert not os.path.isabs(rel)
        assert sha256_file(run_dir / rel) == digest
    assert "manifest.json" not in man["files"]
    assert set(man["stages"]) == {"simulate", "build-panel", "train", "estimate", "analyze", "plot", "report"}


def test_archived_config_is_relocatable(run_dir):
    cfg = json.loads((run_dir / "config/train.json").read_text())
    assert "output_dir" not in cfg and cfg["seed"] == 7 and cfg["train"]["epochs"] == 1


def test_propensities_are_out_of_fold_and_clipped(run_dir):
    rows = read_csv(run_dir / "train/synthetic__S/propensities.csv")
    panel = read_csv(run_dir / "panels/synthetic__S.csv")
    assert len(rows) == 3 * len(panel)
    p = np.array([float(r["p_hat"]) for r in rows])
    assert p.min() >= 0.01 and p.max() <= 0.99
    adm2 = {(r["unit_id"], r["period"]): r["adm2_id"] for r in panel}
    folds = {}
    for r in rows:
        folds.setdefault(adm2[(r["unit_id"], r["period"])], set()).add((r["specification"], r["fold"]))
    for spec_folds in folds.values():  # one validation fold per ADM2 within a specification
        assert len({s for s, _ in spec_folds}) == len(spec_folds)


def test_stale_upstream_file_is_refused(run_dir, tmp_path, capsys):
    copy = tmp_path / "copy"
    shutil.copytree(run_dir, copy)
    with open(copy / "panels/synthetic__S.csv", "a") as fh:
        fh.write("\n")
    assert main(["estimate", "--out", str(copy), "--seed", "7"] + TINY) == 3
    err = capsys.readouterr().err
    assert "changed  panels/synthetic__S.csv" in err and "manifest" in err


def test_estimate_without_training_falls_back_to_diff_in_means(tmp_path):
    out = str(tmp_path)
    assert main(["simulate", "--out", out] + TINY) == 0
    assert main(["build-panel", "--out", out] + TINY) == 0
    assert main(["estimate", "--out", out] + TINY) == 0
    rows = read_csv(tmp_path / "estimate/estimates.csv")
    assert [r["specification"] for r in rows] == ["a_diffmeans"]


def test_exit_codes(tmp_path):
    assert main(["estimate", "--out", str(tmp_path / "empty")]) == 3  # nothing built yet
    assert main(["simulate", "--out", str(tmp_path), "--set", "train.clip_lo=0.995"]) == 2
    assert main(["simulate", "--out", str(tmp_path), "--set", "simulate.bogus=1"]) == 2
    assert main(["simulate", "--config", str(tmp_path / "missing.toml")]) == 2
    assert main(["nonsense"]) == 2
    rejected = TINY + ["--set", "data.min_treated=100000"]
    assert main(["simulate", "--out", str(tmp_path / "r")] + rejected) == 0
    assert main(["build-panel", "--out", str(tmp_path / "r")] + rejected) == 3
    report = json.loads((tmp_path / "r/panels/panel_report.json").read_text())
    assert report["rejected"]["synthetic__S"]["reason"] == "min-treated"


def test_config_file_and_overrides(tmp_path):
    cfg_path = tmp_path / "run.toml"
    cfg_path.write_text('seed = 3\n[train]\nepochs = 2\n[data]\npanel = "panel.csv"\n')
    (tmp_path / "panel.csv").write_text("")
    cfg = load_config(cfg_path, ["train.lr_note=\"x\"", "model.embed_dim=16"])
    assert cfg["seed"] == 3 and cfg["train"]["epochs"] == 2 and cfg["model"]["embed_dim"] == 16
    assert cfg["data"]["panel"] == str(tmp_path / "panel.csv")
    assert cfg["train"]["batch_size"] == DEFAULTS["train"]["batch_size"]
    c = apply_override({}, "a.b=[1, 2]")
    assert c == {"a": {"b": [1, 2]}}
    assert apply_override({}, "name=plain words") == {"name": "plain words"}
    with pytest.raises(ValidationError):
        apply_override({}, "novalue")
    with pytest.raises(ValidationError):
        load_config(None, ["seed=\"zero\""])


def test_manifest_reports_missing_file(tmp_path):
    man = Manifest(str(tmp_path))
    (tmp_path / "a.txt").write_text("x")
    man.record("s", [str(tmp_path / "a.txt")])
    man.check_inputs([str(tmp_path / "a.txt")])
    os.remove(tmp_path / "a.txt")
    with pytest.raises(StaleManifestError, match="missing  a.txt"):
        man.check_inputs([str(tmp_path / "a.txt")])


def write_raw_inputs(root):
    """Two ADM2s in one country; 60 units each; WB projects cover every D1 unit in all periods."""
    with open(root / "neighborhoods.csv", "w") as fh:
        fh.write("unit_id,lat,lon,country,adm1_id,adm2_id\n")
        for i in range(120):
            fh.write(f"n{i:03d},{0.2 + 0.001 * i},{0.2 + (i >= 60)},C,P,D{1 + (i >= 60)}\n")
    with open(root / "projects.csv", "w") as fh:
        fh.write("project_id,funder,sector_code,lat,lon,precision,adm2_id,year\n")
        for t in range(4):
            fh.write(f"w{t},WB,110,0.5,0.5,3,D1,{2002 + 3 * t}\n")
        fh.write("c0,CN,210,0.5,1.5,3,D2,2003\n")
    with open(root / "outcomes.csv", "w") as fh:
        fh.write("unit_id,period,iwi\n")
        rng = np.random.default_rng(0)
        for i in range(120):
            for p in range(1, 5):
                fh.write(f"n{i:03d},{p},{rng.uniform(20, 60):.3f}\n")
    sq = lambda x: [[[x, 0], [x + 1, 0], [x + 1, 1], [x, 1], [x, 0]]]  # noqa: E731
    fc = {"type": "FeatureCollection", "features": [
        {"type": "Feature", "properties": {"adm2_id": f"D{k + 1}", "country": "C"},
         "geometry": {"type": "Polygon", "coordinates": sq(k)}} for k in range(2)]}
    (root / "adm2.geojson").write_text(json.dumps(fc))


def test_build_panel_from_raw_records(tmp_path):
    write_raw_inputs(tmp_path)
    cfg = tmp_path / "raw.toml"
    cfg.write_text('seed = 1\n[data]\nneighborhoods = "neighborhoods.csv"\nprojects = "projects.csv"\n'
                   'outcomes = "outcomes.csv"\nadm2 = "adm2.geojson"\n')
    out = tmp_path / "out"
    assert main(["build-panel", "--config", str(cfg), "--out", str(out)]) == 0
    report = json.loads((out / "panels/panel_report.json").read_text())
    assert report["panels"]["WB__110"]["n_treated"] == 240
    assert report["rejected"]["CN__210"]["reason"] == "min-treated"
    header = (out / "panels/WB__110.csv").read_text().splitlines()[0].split(",")
    # WB has no other-sector projects, so that count has no variation and is dropped
    assert header[-2:] == ["adjacent_adm2_projects", "other_funder_projects"]
    assert report["panels"]["WB__110"]["dropped_covariates"] == ["funder_other_sector_projects"]


def test_module_entry_point_help():
    res = subprocess.run([sys.executable, "-m", "geocausal", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "build-panel" in res.stdout
