import csv
import json
from pathlib import Path

import pytest

from camreid.cli import main
from camreid.config import TrainConfig, load_config, parse_lines
from camreid.exceptions import ConfigError

SMOKE = str(Path(__file__).resolve().parents[1] / "configs" / "smoke.cfg")


def test_defaults_follow_reference_schedule():
    cfg = TrainConfig()
    assert (cfg.pretrain.lr, cfg.pretrain.weight_decay, cfg.pretrain.milestones) == (3.5e-4, 5e-4, (40, 70))
    assert (cfg.pretrain.epochs, cfg.cmfc.epochs) == (80, 40)
    assert (cfg.pretrain.P, cfg.pretrain.K) == (16, 4)
    assert (cfg.gan.n_critic, cfg.gan.batch_size, cfg.gan.beta1, cfg.gan.beta2) == (5, 16, 0.5, 0.999)
    assert (cfg.loss.margin_pretrain, cfg.loss.margin_finetune) == (0.5, 0.3)
    assert (cfg.cmfc.eps_percentile, cfg.cmfc.min_pts) == (2.0, 4)


def test_file_env_and_override_precedence(tmp_path):
    p = tmp_path / "a.cfg"
    p.write_text("# comment\npretrain.epochs=7  # trailing\npretrain.milestones=3,5\ngan.non_saturating=yes\n"
                 "cmfc.P=8\n")
    cfg = load_config(p, environ={})
    assert cfg.pretrain.epochs == 7 and cfg.pretrain.milestones == (3, 5)
    assert cfg.gan.non_saturating is True and cfg.cmfc.P == 8
    env = {"CAMREID__PRETRAIN__EPOCHS": "9", "CAMREID__CMFC__P": "4", "HOME": "/x"}
    cfg = load_config(p, environ=env)
    assert cfg.pretrain.epochs == 9 and cfg.cmfc.P == 4
    cfg = load_config(p, [("pretrain.epochs", "11")], environ=env)
    assert cfg.pretrain.epochs == 11


def test_config_roundtrip(tmp_path):
    cfg = load_config(SMOKE, environ={})
    cfg.save(tmp_path / "snap.cfg")
    again = load_config(tmp_path / "snap.cfg", environ={})
    assert again == cfg


@pytest.mark.parametrize("key,value", [("nope.x", "1"), ("pretrain.nope", "1"), ("pretrain.epochs", "ten"),
                                       ("gan.residual", "maybe")])
def test_bad_keys_and_values(key, value):
    with pytest.raises(ConfigError):
        TrainConfig().set(key, value)


def test_parse_errors(tmp_path):
    with pytest.raises(ConfigError, match="line 2"):
        parse_lines(["a.b=1", "garbage"])
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.cfg")
    with pytest.raises(ConfigError):
        load_config(environ={"CAMREID__TOO__MANY__PARTS": "1"})


def test_cmfc_without_stage2_is_dependency_error(tmp_path, capsys):
    rc = main(["--config", SMOKE, "--run-dir", str(tmp_path), "finetune-cmfc"])
    assert rc == 2
    assert "transfer" in capsys.readouterr().err
    rc = main(["--config", SMOKE, "--run-dir", str(tmp_path), "finetune-cmfc", "--from-baseline"])
    assert rc == 2
    assert "pretrain" in capsys.readouterr().err


def test_eval_needs_checkpoint(tmp_path, capsys):
    assert main(["--run-dir", str(tmp_path), "eval", "--stage", "stage2"]) == 2
    assert "stage2" in capsys.readouterr().err


def test_bad_set_flag(tmp_path):
    assert main(["--run-dir", str(tmp_path), "--set", "pretrain.epochs", "pretrain"]) == 2


@pytest.mark.slow
def test_smoke_run_all(tmp_path, capsys):
    run = tmp_path / "run"
    assert main(["--config", SMOKE, "--run-dir", str(run), "--seed", "3", "run-all"]) == 0
    for sub in ("config", "logs", "checkpoints", "metrics"):
        assert (run / sub).is_dir()
    for ck in ("pretrain", "gan", "stage2", "cmfc"):
        assert (run / "checkpoints" / f"{ck}.safetensors").exists()
    snap = load_config(run / "config" / "pretrain.cfg", environ={})
    assert snap.run.seed == 3 and snap.pretrain.epochs == 1
    with open(run / "metrics" / "results.tsv") as f:
        rows = list(csv.DictReader(f, delimiter="\t"))
    assert [r["stage"] for r in rows] == ["pretrain", "stage2", "cmfc"]
    assert all(r["domain"] == "target" for r in rows)
    gan_log = [json.loads(line) for line in (run / "logs" / "train-gan.jsonl").read_text().splitlines()]
    assert len(gan_log) == 10
    cmfc_log = [json.loads(line) for line in (run / "logs" / "finetune-cmfc.jsonl").read_text().splitlines()]
    assert len(cmfc_log) == 2 and "skipped" not in json.dumps(cmfc_log)
    capsys.readouterr()
    assert main(["--config", SMOKE, "--run-dir", str(run), "--seed", "3", "retrieval-grid", "--stage",
                 "pretrain"]) == 0
    assert (run / "metrics" / "grid_pretrain_target.png").exists()
    assert main(["--config", SMOKE, "--run-dir", str(run), "--seed", "3", "eval", "--stage", "pretrain",
                 "--domain", "source"]) == 0
    assert (run / "metrics" / "pretrain_source.txt").exists()
    assert main(["--config", SMOKE, "--run-dir", str(run), "--seed", "3", "transfer", "--save-images"]) == 0
    assert (run / "data" / "transferred" / "manifest.csv").exists()
