import json
import subprocess
import sys

import jsonschema
import pytest

from sparsect.cli import COMMANDS, EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main
from sparsect.pipeline import load_schema

TINY = {
    "size": 16,
    "reference_views": 64,
    "views": [32, 16, 8],
    "n_train": 12,
    "n_val": 6,
    "n_test": 12,
    "tv_grid": [0.01, 0.1, 0.03],
    "tv_pairs": 4,
    "unet_depth": 2,
    "unet_base_channels": 2,
    "unet_pairs": 8,
    "unet_epochs": 1,
    "det_channels": [2, 4],
    "det_epochs": 1,
    "saliency_samples": 4,
    "timing_images": 2,
    "timing_repeats": 1,
    "n_bootstrap": 20,
}


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(TINY))
    return p


def test_usage_errors(capsys):
    assert main([]) == EXIT_CONFIG
    assert main(["nonsense"]) == EXIT_CONFIG
    assert main(["gen", "--seed", "x"]) == EXIT_CONFIG
    assert "error" in capsys.readouterr().err


def test_config_errors(tmp_path):
    assert main(["gen", "--config", str(tmp_path / "missing.json")]) == EXIT_CONFIG
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"views": [300]}))
    assert main(["gen", "--config", str(bad)]) == EXIT_CONFIG
    bad.write_text("{not json")
    assert main(["gen", "--config", str(bad)]) == EXIT_CONFIG
    bad.write_text(json.dumps({"unknown_key": 1}))
    assert main(["gen", "--config", str(bad)]) == EXIT_CONFIG


def test_missing_models_are_runtime_errors(cfg_path, tmp_path, capsys):
    out = tmp_path / "out"
    for cmd in ("eval-quality", "eval-detect", "saliency", "time"):
        assert main([cmd, "--config", str(cfg_path), "--out", str(out)]) == EXIT_RUNTIME
    assert "tv-sweep" in capsys.readouterr().err


def test_gen_and_seed_override(cfg_path, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["gen", "--config", str(cfg_path), "--out", str(a)]) == EXIT_OK
    assert main(["gen", "--config", str(cfg_path), "--out", str(b), "--seed", "5", "--split", "test"]) == EXIT_OK
    test_a = json.loads((a / "data" / "test" / "manifest.json").read_text())
    test_b = json.loads((b / "data" / "test" / "manifest.json").read_text())
    assert len(test_a) == 12 and [e["seed"] for e in test_a] != [e["seed"] for e in test_b]
    assert not (b / "data" / "train").exists()


def test_threads_env(cfg_path, tmp_path, monkeypatch):
    monkeypatch.setenv("SPARSECT_THREADS", "not-a-number")
    assert main(["gen", "--config", str(cfg_path), "--out", str(tmp_path), "--split", "val"]) == EXIT_OK
    monkeypatch.setenv("SPARSECT_THREADS", "1")
    assert main(["gen", "--config", str(cfg_path), "--out", str(tmp_path), "--split", "val"]) == EXIT_OK


def test_full_chain(cfg_path, tmp_path, capsys):
    out = tmp_path / "out"
    for cmd in COMMANDS:
        code = main([cmd, "--config", str(cfg_path), "--out", str(out)])
        assert code == EXIT_OK, (cmd, capsys.readouterr().err)
    assert (out / "sinograms" / "test" / "test_00000.f64").exists()
    assert (out / "recon" / "val" / "8" / "val_00000.f64").exists()
    assert set(json.loads((out / "tv_weights.json").read_text())) == {"32", "16", "8"}
    assert (out / "models" / "unet_8.json").exists() and (out / "models" / "detector.json").exists()
    for kind in ("quality", "detection", "saliency", "timing"):
        jsonschema.validate(json.loads((out / "reports" / f"{kind}.json").read_text()), load_schema(kind))


def test_console_script_module():
    r = subprocess.run([sys.executable, "-m", "sparsect.cli", "bogus"], capture_output=True, text=True)
    assert r.returncode == EXIT_CONFIG
