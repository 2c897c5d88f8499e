import json

import numpy as np
import pytest

from glimpselab import cli
from glimpselab.model import ModelConfig, init_params, save_params

TINY = ["--set", "hidden_size=8", "--set", "total_batches=3", "--set", "batch_scenes=4",
        "--set", "seq_len=6"]


@pytest.fixture
def ckpt(tmp_path):
    p = init_params(ModelConfig(hidden_size=8), np.random.default_rng(0))
    path = tmp_path / "m.glck"
    save_params(path, p)
    return path


def _header(path):
    return path.read_text().splitlines()[0]


def test_config_parsing():
    cfg = cli.parse_config_text("# comment\nhidden_size = 64  # trailing\n\nlr=0.01\n")
    assert cfg == {"hidden_size": "64", "lr": "0.01"}
    with pytest.raises(cli.UsageError):
        cli.parse_config_text("no equals sign here")
    mc = cli.resolve_model_config("desk", cfg, seed=5)
    assert mc.hidden_size == 64 and mc.lr == 0.01 and mc.seed == 5
    with pytest.raises(cli.UsageError):
        cli.resolve_model_config("desk", {"bogus": "1"}, None)
    with pytest.raises(cli.UsageError):
        cli.resolve_model_config("desk", {"hidden_size": "lots"}, None)
    assert cli.resolve_model_config("paper", {}, None).hidden_size == 512


def test_train_twice_identical_and_manifest(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["train", "--seed", "1", "--out", str(a), *TINY]) == 0
    assert cli.main(["train", "--seed", "1", "--out", str(b), *TINY]) == 0
    assert (a / "train_log.csv").read_bytes() == (b / "train_log.csv").read_bytes()
    assert _header(a / "train_log.csv") == "batch,loss,acc_last20"
    m = json.loads((a / "manifest.json").read_text())
    assert m["resolved"]["config"]["seed"] == 1
    assert m["resolved"]["config"]["hidden_size"] == 8
    assert (a / "model.glck").exists() and (a / "train_log.svg").exists()


def test_train_from_config_file(tmp_path):
    conf = tmp_path / "c.cfg"
    conf.write_text("hidden_size=8\ntotal_batches=2\nbatch_scenes=2\nseq_len=4\n")
    out = tmp_path / "o"
    assert cli.main(["train", "--config", str(conf), "--out", str(out)]) == 0
    assert json.loads((out / "manifest.json").read_text())["resolved"]["config"]["total_batches"] == 2


def test_missing_config_is_usage_error(tmp_path, capsys):
    assert cli.main(["train", "--config", str(tmp_path / "nope.cfg")]) == 1
    assert "nope.cfg" in capsys.readouterr().err


def test_bad_arguments(capsys):
    assert cli.main(["frobnicate"]) == 1
    assert cli.main(["probe", "--checkpoint", "x", "--window", "a:b"]) == 1
    assert "usage error" in capsys.readouterr().err


def test_corrupt_checkpoint_is_runtime_error(tmp_path, capsys):
    bad = tmp_path / "bad.glck"
    bad.write_bytes(b"NOPE" + bytes(20))
    assert cli.main(["eval", "--checkpoint", str(bad), "--out", str(tmp_path / "e")]) == 2
    assert "magic" in capsys.readouterr().err.lower()


def test_glimpse_out_env(tmp_path, monkeypatch):
    monkeypatch.setenv("GLIMPSE_OUT", str(tmp_path / "root"))
    assert cli.main(["oracle", "--episodes", "50", "--seq-len", "10"]) == 0
    d = tmp_path / "root" / "oracle"
    assert _header(d / "oracle.csv") == "timestep,oracle_acc,cache_acc"
    assert (d / "manifest.json").exists() and (d / "oracle.svg").exists()


def test_eval_outputs(tmp_path, ckpt):
    out = tmp_path / "e"
    assert cli.main(["eval", "--checkpoint", str(ckpt), "--episodes", "20", "--seq-len", "12",
                     "--out", str(out)]) == 0
    assert _header(out / "curve.csv") == "timestep,accuracy,ci_low,ci_high"
    assert len((out / "curve.csv").read_text().splitlines()) == 13
    assert (out / "curve.svg").read_text().startswith("<svg")


def test_probe_outputs(tmp_path, ckpt):
    out = tmp_path / "p"
    assert cli.main(["probe", "--checkpoint", str(ckpt), "--scenes", "20", "--window", "35:36",
                     "--layers", "embed", "--no-binding", "--out", str(out)]) == 0
    assert _header(out / "probe.csv") == "layer,target,offset,congruent,timestep,accuracy,baseline,ci_low,ci_high"
    assert (out / "components.svg").exists()


@pytest.mark.parametrize("kind,header", [
    ("replace", "timestep,changed_acc,unchanged_acc,err_original,err_other,ci_low,ci_high"),
    ("add", "timestep,new_acc,old_acc,ci_low,ci_high"),
    ("ood", "timestep,k_acc,control_acc,k_ci_low,k_ci_high,control_ci_low,control_ci_high"),
    ("withheld", "agent,accuracy,ci_low,ci_high,n"),
])
def test_intervene_headers(tmp_path, ckpt, kind, header):
    out = tmp_path / kind
    extra = {"replace": ["--switch", "5", "--horizon", "20"], "add": ["--switch", "5", "--horizon", "20"],
             "ood": ["--horizon", "20"], "withheld": []}[kind]
    assert cli.main(["intervene", kind, "--checkpoint", str(ckpt), "--scenes", "10",
                     "--out", str(out), *extra]) == 0
    name = {"withheld": "withheld"}.get(kind, kind)
    assert _header(out / f"{name}.csv") == header
    assert (out / f"{name}.svg").exists()


def test_plot_command(tmp_path):
    f = tmp_path / "d.csv"
    f.write_text("t,a,b\n0,0.1,0.2\n1,0.5,\n2,0.9,0.4\n")
    assert cli.main(["plot", str(f)]) == 0
    svg = (tmp_path / "d.svg").read_text()
    assert "<polyline" in svg and "t,a,b" in svg
    assert cli.main(["plot", str(f), "--y", "zzz"]) == 1
