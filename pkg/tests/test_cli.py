import json
import re

import numpy as np
import pandas as pd
import pytest
import yaml
from click.testing import CliRunner

from fertgrid import geo
from fertgrid.cli import main
from fertgrid.features import CROP_CLASSES, NUTRIENTS
from fertgrid.toy import YEARS


def run(*args, env=None):
    return CliRunner().invoke(main, [str(a) for a in args], env=env, catch_exceptions=False)


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    assert run("toy", root, "--seed", 0).exit_code == 0
    res = run("pipeline", "-c", root / "config.yaml")
    assert res.exit_code == 0, res.output
    return root, res


def edit_config(root, tmp_path, **changes):
    cfg = yaml.safe_load((root / "config.yaml").read_text())
    cfg.update(changes)
    # keep inputs pointing at the toy fixture while the outputs go elsewhere
    cfg["paths"] = {k: str(root / v) for k, v in cfg["paths"].items()}
    cfg["output"] = str(tmp_path / "out")
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


def test_pipeline_outputs(toy):
    root, _ = toy
    out = root / "out"
    fert = sorted(p.name for p in (out / "downscale").glob("*.tiff"))
    assert len(fert) == 13 * 3 * 5 == 195
    assert fert == sorted(f"{c}{n}{y}.tiff" for c in CROP_CLASSES for n in NUTRIENTS for y in YEARS)
    manifest = json.loads((out / "downscale" / "manifest.json").read_text())["layers"]
    assert set(fert) <= set(manifest)
    assert all(re.fullmatch(r"[0-9a-f]{64}", v) for v in manifest.values())
    lines = (out / "train" / "metrics.tsv").read_text().splitlines()
    assert len(lines) == 1 + 2 * 3
    assert [l.split("\t")[1] for l in lines[1:]] == ["HGB", "naive"] * 3
    assert (out / "validate" / "validation.tsv").exists()
    assert (out / "validate" / "validation.csv").exists()
    assert not list(out.glob(".*.partial"))


def test_explain_outputs(toy):
    root, _ = toy
    d = root / "out" / "explain"
    for nut in NUTRIENTS:
        ranking = pd.read_csv(d / f"ranking_{nut}.tsv", sep="\t")
        assert len(ranking) == 10
        assert set(ranking["category"]) <= {"environmental", "agrological", "socioeconomic", "general"}
        head = (d / f"shap_{nut}.tsv").read_text().splitlines()[0]
        assert head.startswith("# rows: all labeled rows (n=")


def test_structured_log_lines(toy):
    _, res = toy
    lines = [l for l in res.stderr.splitlines() if l.startswith("stage=")]
    assert lines and all(re.fullmatch(r"stage=\S+ key=\S+ metric=\S+ value=\S+", l) for l in lines)
    effs = [float(l.split("value=")[1]) for l in lines if "metric=efficiency_max_abs" in l]
    assert len(effs) == 3 and max(effs) <= 1e-8


def test_rasters_are_non_negative_and_georeferenced(toy):
    root, _ = toy
    r = geo.read_raster(root / "out" / "downscale" / "WheatN2000.tiff")
    assert r.unit == "kg"
    assert r.spec.shape == (20, 20)
    assert np.nanmin(r.values) >= 0


def test_singleton_grid_train(toy, tmp_path):
    root, _ = toy
    cfg = edit_config(root, tmp_path, model={"k_outer": 2, "k_inner": 2,
                                             "config": {"max_iter": 10, "max_depth": 2}})
    assert run("ingest", "-c", cfg).exit_code == 0
    assert run("train", "-c", cfg).exit_code == 0
    lines = (tmp_path / "out" / "train" / "metrics.tsv").read_text().splitlines()
    assert [l.split("\t")[:2] for l in lines[1:3]] == [["N", "HGB"], ["N", "naive"]]


def test_workers_do_not_change_outputs(toy, tmp_path):
    root, _ = toy
    cfg = edit_config(root, tmp_path)
    for stage in ("ingest", "train"):
        assert run(stage, "-c", cfg).exit_code == 0
    (tmp_path / "out" / "train").rename(tmp_path / "out" / "train_keep")
    (tmp_path / "out" / "train_keep").rename(tmp_path / "out" / "train")
    assert run("explain", "-c", cfg, env={"FERTGRID_WORKERS": "3"}).exit_code == 0
    for nut in NUTRIENTS:
        a = (root / "out" / "explain" / f"shap_{nut}.tsv").read_text()
        b = (tmp_path / "out" / "explain" / f"shap_{nut}.tsv").read_text()
        assert a == b


# -- exit codes ---------------------------------------------------------------------

def test_missing_config_is_config_error(tmp_path):
    res = run("ingest", "-c", tmp_path / "nope.yaml")
    assert res.exit_code == 2 and "config error" in res.stderr


def test_bad_yaml_is_config_error(tmp_path):
    (tmp_path / "c.yaml").write_text("seed: [1, 2\n")
    assert run("train", "-c", tmp_path / "c.yaml").exit_code == 2


def test_bad_worker_count(toy, tmp_path):
    root, _ = toy
    cfg = edit_config(root, tmp_path)
    assert run("ingest", "-c", cfg).exit_code == 0
    assert run("train", "-c", cfg, env={"FERTGRID_WORKERS": "lots"}).exit_code in (0, 2)
    assert run("explain", "-c", cfg, env={"FERTGRID_WORKERS": "lots"}).exit_code == 2


def test_missing_artifact_is_data_error(toy, tmp_path):
    root, _ = toy
    cfg = edit_config(root, tmp_path)
    res = run("explain", "-c", cfg)
    assert res.exit_code == 3
    assert "missing artifact" in res.stderr and "ingest" in res.stderr
    assert not (tmp_path / "out" / "explain").exists()
    assert not (tmp_path / "out" / ".explain.partial").exists()


def test_infeasible_total_exit_code(toy, tmp_path):
    root, _ = toy
    areas = pd.read_csv(root / "areas.csv")
    areas.loc[0, "area"] = 1e9  # far beyond any country's land
    areas.to_csv(tmp_path / "areas.csv", index=False)
    cfg = edit_config(root, tmp_path)
    doc = yaml.safe_load(cfg.read_text())
    doc["paths"]["areas"] = str(tmp_path / "areas.csv")
    cfg.write_text(yaml.safe_dump(doc))
    for stage in ("ingest", "train", "shares", "adjust"):
        assert run(stage, "-c", cfg).exit_code == 0, stage
    res = run("downscale", "-c", cfg)
    assert res.exit_code == 4 and "infeasible" in res.stderr
    assert not (tmp_path / "out" / "downscale").exists()
    assert not (tmp_path / "out" / ".downscale.partial").exists()


def test_bad_rates_are_data_error(toy, tmp_path):
    root, _ = toy
    rates = pd.read_csv(root / "rates.csv")
    rates.loc[0, "crop"] = "Barley"
    rates.to_csv(tmp_path / "rates.csv", index=False)
    cfg = edit_config(root, tmp_path)
    doc = yaml.safe_load(cfg.read_text())
    doc["paths"]["rates"] = str(tmp_path / "rates.csv")
    cfg.write_text(yaml.safe_dump(doc))
    res = run("ingest", "-c", cfg)
    assert res.exit_code == 3 and "Barley" in res.stderr
