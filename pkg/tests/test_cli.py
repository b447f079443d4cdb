import csv
import json

import numpy as np
import pytest

from phasefuse.cli import HISTORY_FIELDS, build_parser, main
from phasefuse.config import RunConfig, load_config
from phasefuse.data import write_gray16
from phasefuse.errors import ConfigError

TINY_CFG = {
    "model": {"image_size": 32, "channels": [2, 2, 2, 2], "fusion_scales": [1], "embed_dim": 4,
              "num_heads": 1, "mlp_hidden": 4, "depth": 1},
    "training": {"epochs": 2, "warmup_epochs": 1, "batch_size": 8, "folds": 3},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "cfg.json").write_text(json.dumps(TINY_CFG))
    assert main(["synth", "--out", str(root / "d"), "--n", "5", "--size", "32", "--seed", "3"]) == 0
    return root


# -------------------------------------------------------------------- config

def test_config_defaults_and_round_trip(tmp_path):
    cfg = load_config(None, environ={})
    assert cfg.training.base_lr == 0.001 and cfg.model.image_size == 224 and cfg.enhancement.window == 15
    again = RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again.to_dict() == cfg.to_dict()


@pytest.mark.parametrize("doc", [{"optim": {}}, {"training": {"lr": 1}}, {"model": []}, {"eval": {"fold": 0, "x": 1}}])
def test_config_rejects_unknown(tmp_path, doc):
    (tmp_path / "c.json").write_text(json.dumps(doc))
    with pytest.raises(ConfigError):
        load_config(tmp_path / "c.json", environ={})


def test_seed_env_override(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"training": {"seed": 5}}))
    assert load_config(tmp_path / "c.json", environ={}).training.seed == 5
    assert load_config(tmp_path / "c.json", environ={"PHASEFUSE_SEED": "99"}).training.seed == 99
    with pytest.raises(ConfigError):
        load_config(None, environ={"PHASEFUSE_SEED": "nine"})


def test_bad_json(tmp_path):
    (tmp_path / "c.json").write_text("{\n  \"model\": ")
    with pytest.raises(ConfigError, match=":2:"):
        load_config(tmp_path / "c.json", environ={})


# ----------------------------------------------------------------------- cli

@pytest.mark.parametrize("cmd", [[], ["enhance"], ["synth"], ["train"], ["eval"], ["gradcam"], ["gradcheck"],
                                 ["kfold"]])
def test_help_exits_zero(cmd, capsys):
    with pytest.raises(SystemExit) as e:
        build_parser().parse_args(cmd + ["--help"])
    assert e.value.code == 0
    assert "usage" in capsys.readouterr().out


def test_enhance_outputs(tmp_path, capsys):
    img = np.random.default_rng(0).uniform(size=(32, 32))
    write_gray16(tmp_path / "x.png", img)
    assert main(["enhance", "--in", str(tmp_path / "x.png"), "--out", str(tmp_path / "o"), "--channels"]) == 0
    names = sorted(p.name for p in (tmp_path / "o").iterdir())
    assert names == ["x.elea.png", "x.lpe.png", "x.lwpa.png", "x.png"]


def test_train_eval_gradcam_pipeline(workspace, capsys, monkeypatch):
    monkeypatch.setenv("PHASEFUSE_SEED", "11")
    w = workspace
    assert main(["kfold", "--manifest", str(w / "d/manifest.csv"), "--config", str(w / "cfg.json"),
                 "--out", str(w / "kf"), "--assign-only"]) == 0
    ck = w / "m.pfus"
    assert main(["train", "--manifest", str(w / "kf/folds.csv"), "--config", str(w / "cfg.json"),
                 "--fold", "0", "--out", str(ck), "--quiet"]) == 0
    with open(w / "m.history.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0]) == HISTORY_FIELDS and len(rows) == 2
    assert main(["eval", "--ckpt", str(ck), "--manifest", str(w / "kf/folds.csv"), "--fold", "0",
                 "--out", str(w / "rep.csv")]) == 0
    lines = (w / "rep.csv").read_text().splitlines()
    assert lines[0] == "Metric,Avg,Normal,Pneumonia,COVID" and len(lines) == 6
    assert main(["gradcam", "--ckpt", str(ck), "--in", str(w / "d/covid_0000.png"), "--class", "2",
                 "--out", str(w / "cam.png")]) == 0
    assert (w / "cam.png").is_file()


def test_train_reproducible_under_env_seed(workspace, monkeypatch):
    w = workspace
    monkeypatch.setenv("PHASEFUSE_SEED", "4")
    for name in ("a", "b"):
        assert main(["train", "--manifest", str(w / "d/manifest.csv"), "--config", str(w / "cfg.json"),
                     "--fold", "1", "--out", str(w / f"{name}.pfus"), "--quiet"]) == 0
    assert (w / "a.pfus").read_bytes() == (w / "b.pfus").read_bytes()
    assert (w / "a.history.csv").read_text() == (w / "b.history.csv").read_text()


def test_ttest_utility(capsys):
    assert main(["eval", "--ttest", "0.9,0.92,0.95", "--against", "0.85,0.9,0.9"]) == 0
    assert capsys.readouterr().out.startswith("t=4")


@pytest.mark.parametrize("argv,code,prefix", [
    (["train", "--manifest", "missing.csv", "--out", "x.pfus"], 3, "E_DATA"),
    (["eval", "--ckpt", "missing.pfus", "--manifest", "m.csv", "--out", "r.csv"], 3, "E_DATA"),
    (["synth", "--out", "s", "--n", "2"], 2, "E_CONFIG"),
    (["eval", "--ttest", "1,2"], 2, "E_CONFIG"),
])
def test_error_exit_codes(tmp_path, monkeypatch, capsys, argv, code, prefix):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == code
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith(prefix + ":")


def test_bad_config_exit_code(workspace, tmp_path, capsys):
    (tmp_path / "bad.json").write_text(json.dumps({"model": {"bogus": 1}}))
    assert main(["train", "--manifest", str(workspace / "d/manifest.csv"), "--config", str(tmp_path / "bad.json"),
                 "--out", str(tmp_path / "x.pfus")]) == 2
    assert capsys.readouterr().err.startswith("E_CONFIG:")


def test_gradcam_unknown_layer(workspace, capsys):
    ck = workspace / "m.pfus"
    if not ck.is_file():
        pytest.skip("pipeline test did not produce a checkpoint")
    assert main(["gradcam", "--ckpt", str(ck), "--in", str(workspace / "d/covid_0000.png"), "--class", "1",
                 "--layer", "lung:9", "--out", str(workspace / "x.png")]) == 2


def test_numeric_exit_code(monkeypatch, capsys):
    import phasefuse.checks as checks
    monkeypatch.setattr(checks, "op_checks", lambda seed=0, max_coords=None: {"fake": 1.0})
    assert main(["gradcheck", "--ops-only"]) == 4
    assert capsys.readouterr().err.startswith("E_NUMERIC:")
