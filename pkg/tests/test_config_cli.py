import json

import numpy as np
import pytest

from aef import harness
from aef.cli import main
from aef.config import ConfigError, dump_config, parse_config
from aef.data import save_perturbation

TINY = """
[run]
run_id = tiny

[hyperparams]
t_out = 2
t_in = 1
batch_size = 4

[surrogates]
image_size = 16
width = 4
pretrain_steps = 5
pretrain_images = 16
min_disagreement = 0.0

[ensemble]
ic = input-concat
li = latent-injection
am = attention-mask
si = style-injection

[resistance]
am = 1.0
si = 2.0

[train_images]
n = 4

[eval_images]
n = 4
seed = 1
"""


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY)
    return path


def test_parse_and_echo_roundtrip():
    cfg = parse_config(TINY)
    assert cfg.hp.t_out == 2 and cfg.surrogates.image_size == 16 and cfg.resistance["si"] == 2.0
    assert list(cfg.ensemble) == ["ic", "li", "am", "si"]
    again = parse_config(dump_config(cfg))
    assert again == cfg and dump_config(again) == dump_config(cfg)


def test_step_size_none_and_value():
    assert parse_config(TINY).hp.step_size is None
    cfg = parse_config(TINY.replace("t_in = 1", "t_in = 1\nstep_size = 0.002"))
    assert cfg.hp.step_size == 0.002


@pytest.mark.parametrize("text, msg", [
    (TINY.replace("t_in = 1", "t_inn = 1"), "unknown key 't_inn'"),
    (TINY.replace("[ensemble]", "[models]"), "unknown section"),
    (TINY.split("[ensemble]")[0], "missing \\[ensemble\\]"),
    (TINY.replace("= style-injection", "= diffusion"), "unknown paradigm"),
    (TINY.replace("t_out = 2", "t_out = two"), "cannot parse"),
    (TINY.replace("batch_size = 4", "temperature = 0"), "temperature"),
    (TINY.replace("am = 1.0", "zz = 1.0"), "not a model"),
])
def test_config_errors(text, msg):
    with pytest.raises(ConfigError, match=msg):
        parse_config(text)


def test_cli_exit_codes(tmp_path, cfg_file):
    bad = tmp_path / "bad.ini"
    bad.write_text(TINY.replace("t_in = 1", "bogus = 1"))
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
    assert main(["train", "--config", str(tmp_path / "nope.ini")]) == 1
    assert main(["eval", "--config", str(cfg_file), "--perturbation", str(tmp_path / "nope.aefp"),
                 "--out", str(tmp_path / "o")]) == 1
    assert main(["sweep", "--config", str(cfg_file), "--param", "gamma", "--values", "1",
                 "--out", str(tmp_path / "o")]) == 1


def test_numeric_abort_exit_code(tmp_path, cfg_file, monkeypatch):
    def boom(*a, **k):
        raise FloatingPointError("outer iteration 0, batch 0: non-finite loss")
    monkeypatch.setattr(harness, "cmd_train", boom)
    assert main(["train", "--config", str(cfg_file)]) == 2


def test_train_then_eval(tmp_path, cfg_file, capsys):
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg_file), "--out", str(out)]) == 0
    for name in ("perturbation.aefp", "trace.json", "trace.csv", "train_summary.csv", "config.resolved.ini"):
        assert (out / name).exists()
    assert parse_config((out / "config.resolved.ini").read_text()) == parse_config(TINY)
    trace = json.loads((out / "trace.json").read_text())
    assert len(trace["trace"]) == 2 and trace["extra"]["stage1_steps"] == 2
    capsys.readouterr()
    assert main(["eval", "--config", str(cfg_file), "--perturbation", str(out / "perturbation.aefp"),
                 "--out", str(out)]) == 0
    first = (out / "eval.json").read_bytes()
    assert main(["eval", "--config", str(cfg_file), "--perturbation", str(out / "perturbation.aefp"),
                 "--out", str(out)]) == 0
    assert (out / "eval.json").read_bytes() == first
    imp = json.loads(first)["imperceptibility"]
    assert imp["psnr_db"] > 25.0


def test_eval_zero_perturbation(tmp_path, cfg_file):
    cfg = parse_config(TINY)
    save_perturbation(np.zeros((3, 16, 16)), 0.05, tmp_path / "zero.aefp")
    res = harness.cmd_eval(cfg, tmp_path / "zero.aefp", tmp_path / "o")
    assert all(v["srmask_pct"] == 0.0 for v in res["per_model"].values())
    assert res["imperceptibility"]["psnr_db"] == 100.0


def test_eval_size_mismatch(tmp_path):
    save_perturbation(np.zeros((3, 8, 8)), 0.05, tmp_path / "small.aefp")
    with pytest.raises(ConfigError, match="8x8"):
        harness.cmd_eval(parse_config(TINY), tmp_path / "small.aefp", tmp_path / "o")


def test_single_value_sweep_matches_train_eval(tmp_path):
    cfg = parse_config(TINY)
    groups = harness.cmd_sweep(cfg, "T", [cfg.hp.temperature], tmp_path / "s")
    harness.cmd_train(cfg, tmp_path / "t")
    res = harness.cmd_eval(cfg, tmp_path / "t" / "perturbation.aefp", tmp_path / "t")
    (label, g), = groups.items()
    assert label == "T=0.1"
    assert g["per_model"] == {m: v["srmask_pct"] for m, v in res["per_model"].items()}


def test_sweep_rejects_bad_values(tmp_path):
    with pytest.raises(ConfigError):
        harness.cmd_sweep(parse_config(TINY), "T", [0.0], tmp_path / "s")
    with pytest.raises(ConfigError):
        harness.cmd_sweep(parse_config(TINY), "T", [], tmp_path / "s")


def test_holdout_roles(tmp_path):
    cfg = parse_config(TINY)
    res = harness.cmd_holdout(cfg, out=tmp_path / "h")
    assert sorted(res) == ["am", "ic", "li", "si"]
    for excl, fold in res.items():
        roles = list(fold["roles"].values())
        assert roles.count("white-box") == 3 and fold["roles"][excl] == "black-box"
    text = (tmp_path / "h" / "holdout.csv").read_text()
    assert text.count(":black-box,") == 4 and text.count(":white-box,") == 12
    with pytest.raises(ConfigError, match="unknown model id"):
        harness.cmd_holdout(cfg, "zz", tmp_path / "h")


def test_ablate_symmetric_ensemble(tmp_path):
    """Four interchangeable models: adaptive and static weighting land within 5 points."""
    text = TINY.replace("= latent-injection", "= input-concat").replace("= attention-mask", "= input-concat")
    text = text.replace("= style-injection", "= input-concat").replace("am = 1.0\nsi = 2.0", "")
    res = harness.cmd_ablate(parse_config(text), tmp_path / "a")
    assert abs(res["adaptive"]["mean"] - res["static"]["mean"]) <= 5.0
    assert all(np.allclose(w, 0.25) for w in res["weights"]["static"])
    assert all(abs(sum(w) - 1) < 1e-12 for w in res["weights"]["adaptive"])


def test_threads_do_not_change_outputs(tmp_path, monkeypatch):
    cfg = parse_config(TINY)
    monkeypatch.setenv("AEF_THREADS", "1")
    harness.cmd_holdout(cfg, out=tmp_path / "one")
    monkeypatch.setenv("AEF_THREADS", "2")
    harness.cmd_holdout(cfg, out=tmp_path / "two")
    assert (tmp_path / "one" / "holdout.json").read_bytes() == (tmp_path / "two" / "holdout.json").read_bytes()
