import csv
import io
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from aamtl.aam import train_aam
from aamtl.cli import DEFAULTS, main, resolve_config
from aamtl.dataset_io import load_entries, load_model, read_manifest, save_model, write_manifest
from aamtl.exceptions import ConfigError
from aamtl.geometry import as_points
from aamtl.numeric import span_distance

FAST = ["--face-size", "60", "--n-restarts", "2"]


def run(*argv):
    return main([str(a) for a in argv])


def snapshot(directory: Path) -> dict:
    """File bytes under ``directory``; summary.json without its timestamp."""
    out = {}
    for p in sorted(directory.rglob("*")):
        if p.is_file():
            data = p.read_bytes()
            if p.name == "summary.json":
                s = json.loads(data)
                s.pop("timestamp")
                data = json.dumps(s, sort_keys=True).encode()
            out[str(p.relative_to(directory))] = data
    return out


@pytest.fixture(scope="module")
def generic(tmp_path_factory):
    d = tmp_path_factory.mktemp("generic")
    assert run("synth", "--scenario", "generic", "--n-samples", 16, "--out", d) == 0
    return d


@pytest.fixture(scope="module")
def planted_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("planted")
    assert run("synth", "--n-source", 30, "--n-target", 5, "--n-test", 6, "--out", d) == 0
    return d


@pytest.fixture(scope="module")
def source_model(tmp_path_factory, planted_dir):
    d = tmp_path_factory.mktemp("src")
    assert run("train", "--manifest", planted_dir / "source/manifest.tsv", "--label", "source",
               "--out", d, *FAST) == 0
    return d / "model.aam"


# train -------------------------------------------------------------------------------

def test_train_summary(tmp_path, generic):
    assert run("train", "--manifest", generic / "manifest.tsv", "--out", tmp_path, *FAST) == 0
    s = json.loads((tmp_path / "summary.json").read_text())
    assert s["K"] == 2  # two generating motions
    assert s["V"] == 20 and s["L"] > 0 and s["M"] >= 1
    assert 0.98 <= s["retained_shape_variance"] <= 1.0 + 1e-12
    assert load_model(tmp_path / "model.aam").shape.n_local == 2
    assert "timestamp" in s and "timestamp" not in json.loads((tmp_path / "config.json").read_text())


def test_train_rerun_same_checksum(tmp_path, generic):
    args = ("train", "--manifest", generic / "manifest.tsv", *FAST)
    assert run(*args, "--out", tmp_path / "a") == 0
    assert run(*args, "--out", tmp_path / "b") == 0
    a = json.loads((tmp_path / "a/summary.json").read_text())["model_sha256"]
    b = json.loads((tmp_path / "b/summary.json").read_text())["model_sha256"]
    assert a == b
    assert (tmp_path / "a/model.aam").read_bytes() == (tmp_path / "b/model.aam").read_bytes()


def test_train_single_entry_is_data_error(tmp_path, generic, capsys):
    entries = [e for e in read_manifest(generic / "manifest.tsv") if e.split == "train"][:1]
    (tmp_path / "one.tsv").write_text(write_manifest(entries))
    assert run("train", "--manifest", tmp_path / "one.tsv", "--out", tmp_path / "o") == 3
    err = capsys.readouterr().err
    assert "one.tsv" in err and "at least 2" in err


def test_unknown_config_key(tmp_path, generic):
    (tmp_path / "c.yaml").write_text(f"manifest: {generic / 'manifest.tsv'}\nlearning_rate: 3\n")
    assert run("train", "--config", tmp_path / "c.yaml", "--out", tmp_path / "o") == 2


def test_unknown_fit_key(tmp_path, generic):
    (tmp_path / "c.json").write_text(json.dumps({"fit": {"iterations": 3}}))
    assert run("train", "--config", tmp_path / "c.json", "--manifest", generic / "manifest.tsv",
               "--out", tmp_path / "o") == 2


def test_missing_path_is_config_error(tmp_path):
    assert run("train", "--manifest", tmp_path / "nope.tsv", "--out", tmp_path / "o") == 2


def test_missing_out_is_config_error(generic):
    assert run("train", "--manifest", generic / "manifest.tsv") == 2


def test_bad_flag_is_usage_error():
    assert run("train", "--no-such-flag") == 2
    assert run("frobnicate") == 2


def test_precedence():
    env = {"AAMTL_SEED": "5", "AAMTL_WORKERS": "3"}
    cfg = resolve_config("train", {"seed": 1, "workers": 2, "out": "x"}, {}, env)
    assert (cfg["seed"], cfg["workers"]) == (5, 3)
    cfg = resolve_config("train", {"seed": 1, "out": "x"}, {"seed": 9}, env)
    assert cfg["seed"] == 9
    cfg = resolve_config("train", {"seed": 1, "out": "x"}, {}, {})
    assert cfg["seed"] == 1 and cfg["face_size"] == DEFAULTS["train"]["face_size"]
    with pytest.raises(ConfigError):
        resolve_config("train", {"out": "x"}, {}, {"AAMTL_SEED": "abc"})
    with pytest.raises(ConfigError):
        resolve_config("train", {"command": "fit", "out": "x"}, {}, {})


def test_env_override_reaches_output(tmp_path, generic, monkeypatch):
    monkeypatch.setenv("AAMTL_SEED", "17")
    assert run("train", "--manifest", generic / "manifest.tsv", "--out", tmp_path, *FAST) == 0
    assert json.loads((tmp_path / "config.json").read_text())["seed"] == 17


def test_echoed_config_reproduces(tmp_path, generic):
    assert run("train", "--manifest", generic / "manifest.tsv", "--out", tmp_path, *FAST) == 0
    before = snapshot(tmp_path)
    assert run("train", "--config", tmp_path / "config.json") == 0
    assert snapshot(tmp_path) == before


# transfer ------------------------------------------------------------------------------

def test_transfer_zero_d_spans_target(tmp_path, planted_dir, source_model):
    assert run("transfer", "--source-model", source_model,
               "--target-manifest", planted_dir / "target/manifest.tsv",
               "--d-shape", 0, "--d-appearance", 0, "--out", tmp_path, *FAST) == 0
    m = load_model(tmp_path / "model.aam")
    t = load_model(tmp_path / "target_model.aam")
    assert span_distance(m.shape.basis, t.shape.basis) < 1e-10
    assert span_distance(m.appearance.basis, t.appearance.basis) < 1e-10


def test_transfer_report_sorted(tmp_path, planted_dir, source_model):
    assert run("transfer", "--source-model", source_model,
               "--target-manifest", planted_dir / "target/manifest.tsv",
               "--d-shape", 1, "--d-appearance", 2, "--out", tmp_path, *FAST) == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    s = json.loads((tmp_path / "summary.json").read_text())
    assert len(s["selected_shape"]) == 1 and len(s["selected_appearance"]) == 2
    assert rep["ordering"] == "target_variance"
    for part, d in (("shape", 1), ("appearance", 2)):
        r = rep[part]
        desc = r["sigma2_descending"]
        assert desc == sorted(desc, reverse=True)
        assert desc == [r["sigma2"][i] for i in r["order"]]
        assert r["selected"] == r["order"][:d] == s[f"selected_{part}"]


def test_transfer_d_out_of_range(tmp_path, planted_dir, source_model):
    assert run("transfer", "--source-model", source_model,
               "--target-manifest", planted_dir / "target/manifest.tsv",
               "--d-shape", 99, "--out", tmp_path, *FAST) == 2


def test_transfer_landmark_mismatch(tmp_path, generic, planted_dir):
    # a model on 12 of the 20 landmarks cannot serve as the source
    entries = read_manifest(generic / "manifest.tsv")
    imgs, shapes = load_entries(entries[:4])
    m = train_aam(imgs, [as_points(s)[:12].reshape(-1) for s in shapes], face_size=60.0)
    save_model(m, tmp_path / "small.aam")
    assert run("transfer", "--source-model", tmp_path / "small.aam",
               "--target-manifest", planted_dir / "target/manifest.tsv", "--d-shape", 0,
               "--d-appearance", 0, "--out", tmp_path / "o", *FAST) == 3


def test_corrupt_model_is_data_error(tmp_path, planted_dir, source_model):
    blob = bytearray(source_model.read_bytes())
    blob[-40] ^= 0xFF
    (tmp_path / "bad.aam").write_bytes(bytes(blob))
    assert run("transfer", "--source-model", tmp_path / "bad.aam",
               "--target-manifest", planted_dir / "target/manifest.tsv",
               "--out", tmp_path / "o") == 3


# fit / eval / sweep -------------------------------------------------------------------------

def test_fit_outputs(tmp_path, planted_dir, source_model):
    e = [x for x in read_manifest(planted_dir / "target/manifest.tsv") if x.split == "test"][0]
    assert run("fit", "--model", source_model, "--image", e.image, "--init-landmarks", e.landmarks,
               "--out", tmp_path, "--n-restarts", 2) == 0
    fit = json.loads((tmp_path / "fit.json").read_text())
    assert fit["status"] in ("converged", "stalled", "max_iterations")
    assert len(fit["shape"]) == 40 and fit["cost_trace"]
    assert (tmp_path / "fit.pts").read_text().startswith("version: 1\nn_points: 20\n{")


def test_fit_degenerate_box_is_numerical(tmp_path, planted_dir, source_model):
    e = read_manifest(planted_dir / "target/manifest.tsv")[0]
    assert run("fit", "--model", source_model, "--image", e.image,
               "--bbox", 10, 10, 10, 40, "--out", tmp_path) == 4


def test_fit_needs_init(tmp_path, planted_dir, source_model):
    e = read_manifest(planted_dir / "target/manifest.tsv")[0]
    assert run("fit", "--model", source_model, "--image", e.image, "--out", tmp_path) == 2


def test_eval_outputs(tmp_path, planted_dir, source_model):
    assert run("eval", "--models", source_model, source_model,
               "--test-manifest", planted_dir / "target/manifest.tsv", "--out", tmp_path,
               "--n-restarts", 2, "--workers", 2) == 0
    for lab in ("source_0", "source_1"):
        rows = list(csv.reader(io.StringIO((tmp_path / f"curve_{lab}.csv").read_text())))
        assert rows[0] == ["tolerance", "fraction"] and len(rows) - 1 == 64
        ex = list(csv.reader(io.StringIO((tmp_path / f"examples_{lab}.csv").read_text())))
        assert ex[0] == ["id", "rms", "cost_iters"] and len(ex) - 1 == 6
    s = json.loads((tmp_path / "summary.json").read_text())
    assert s["models"]["source_0"]["fraction_at_0.05"] == s["models"]["source_1"]["fraction_at_0.05"]
    a = (tmp_path / "examples_source_0.csv").read_text()
    assert a == (tmp_path / "examples_source_1.csv").read_text()


def test_sweep_outputs(tmp_path, planted_dir, source_model):
    assert run("sweep-d", "--source-model", source_model,
               "--target-manifest", planted_dir / "target/manifest.tsv", "--d-values", 0, 1,
               "--out", tmp_path, *FAST) == 0
    rows = list(csv.reader(io.StringIO((tmp_path / "sweep.csv").read_text())))
    assert rows[0] == ["d", "ordering", "fraction_at_0.05"]
    assert [(r[0], r[1]) for r in rows[1:]] == [("0", "target_variance"), ("0", "source_eigenvalue"),
                                                ("1", "target_variance"), ("1", "source_eigenvalue")]
    assert rows[1][2] == rows[2][2]


# synth -------------------------------------------------------------------------------------

def test_synth_loads_back(generic, planted_dir):
    for m in (generic / "manifest.tsv", planted_dir / "source/manifest.tsv",
              planted_dir / "target/manifest.tsv"):
        imgs, shapes = load_entries(read_manifest(m))
        assert imgs and all(np.isfinite(i).all() for i in imgs)
        assert all(s.size == 40 for s in shapes)


def test_synth_bad_scenario(tmp_path):
    (tmp_path / "c.yaml").write_text("scenario: other\n")
    assert run("synth", "--config", tmp_path / "c.yaml", "--out", tmp_path / "o") == 2


# determinism ----------------------------------------------------------------------------------

def test_every_command_deterministic(tmp_path, planted_dir, source_model):
    tgt = planted_dir / "target/manifest.tsv"
    e = [x for x in read_manifest(tgt) if x.split == "test"][0]
    commands = {
        "synth": ("synth", "--scenario", "generic", "--n-samples", 6),
        "train": ("train", "--manifest", tgt, *FAST),
        "transfer": ("transfer", "--source-model", source_model, "--target-manifest", tgt,
                     "--d-shape", 1, "--d-appearance", 1, *FAST),
        "fit": ("fit", "--model", source_model, "--image", e.image, "--init-landmarks",
                e.landmarks, "--n-restarts", 2),
        "eval": ("eval", "--models", source_model, "--test-manifest", tgt, "--n-restarts", 2,
                 "--workers", 3),
        "sweep-d": ("sweep-d", "--source-model", source_model, "--target-manifest", tgt,
                    "--d-values", 1, *FAST),
    }
    for name, args in commands.items():
        out = tmp_path / name
        assert run(*args, "--out", out) == 0, name
        first = snapshot(out)
        assert run(*args, "--out", out) == 0, name
        assert snapshot(out) == first, name


def test_console_script_help():
    r = subprocess.run([sys.executable, "-m", "aamtl.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for c in ("train", "transfer", "fit", "eval", "sweep-d", "synth"):
        assert c in r.stdout
