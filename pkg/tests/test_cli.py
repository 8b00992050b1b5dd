import csv
import json
import os

import pytest

from gnnrobust.cli import main, read_config
from gnnrobust.exceptions import ParseError
from gnnrobust.models import achieved_sparsity, load_checkpoint

DATA = "synth:n=60,k=2,p_in=0.2,p_out=0.02,f=8,noise=0.3,seed=0"


@pytest.fixture(scope="module")
def ckpt(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("cli") / "ck")
    assert main(["train", "--dataset", DATA, "--agg", "distribution", "--epochs", "10",
                 "--hidden", "8", "--out", out]) == 0
    return out


def test_train_writes_checkpoint(ckpt, capsys):
    cfg = json.load(open(os.path.join(ckpt, "config.json")))
    assert cfg["dataset"] == DATA and cfg["hidden"] == 8
    assert load_checkpoint(ckpt).stats is not None


def test_sweep_outputs(ckpt, tmp_path, capsys):
    out = str(tmp_path / "sw")
    code = main(["sweep", "--ckpt", ckpt, "--aggs", "mean,distribution", "--sites", "weights,adjacency",
                 "--bers", "0,1e-3", "--seeds", "2", "--repeats", "2", "--out", out])
    assert code == 0
    with open(os.path.join(out, "records.csv"), encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2 * 2 * 2 * 2 * 2
    for name in ("summary.json", "accuracy_vs_ber.csv", "pareto.csv", "timings.csv"):
        assert os.path.exists(os.path.join(out, name))
    assert "distribution" in capsys.readouterr().out


def test_profile_outputs(tmp_path):
    out = str(tmp_path / "prof.csv")
    assert main(["profile", "--sizes", "2000,4000", "--aggs", "dynamic_weight", "--dim", "8",
                 "--out", out]) == 0
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert {r["aggregator"] for r in rows} == {"mean", "dynamic_weight"}
    assert float(next(r for r in rows if r["aggregator"] == "mean")["ratio_vs_mean"]) == 1.0
    assert "r2" in json.load(open(str(tmp_path / "prof_fit.json")))["mean"]


def test_prune_and_inject(ckpt, tmp_path, capsys):
    out = str(tmp_path / "pruned")
    assert main(["prune", "--ckpt", ckpt, "--sparsity", "0.3", "--finetune-epochs", "3", "--out", out]) == 0
    assert achieved_sparsity(load_checkpoint(out)) >= 0.3 - 1e-3
    capsys.readouterr()
    assert main(["inject", "--ckpt", out, "--site", "embeddings", "--ber", "1e-3", "--seed", "1"]) == 0
    text = capsys.readouterr().out
    assert text.startswith("accuracy ") and "affected_fraction" in text


def test_config_file_supplies_flags(ckpt, tmp_path, capsys):
    conf = tmp_path / "run.conf"
    conf.write_text(f"# single shot\nckpt = {ckpt}\nsite=weights\n--ber=1e-4\nseed=3\n")
    assert main(["--config", str(conf), "inject"]) == 0
    first = capsys.readouterr().out
    assert main(["inject", "--ckpt", ckpt, "--site", "weights", "--ber", "1e-4", "--seed", "3"]) == 0
    assert capsys.readouterr().out == first


def test_configuration_errors_exit_2(ckpt, tmp_path, capsys):
    assert main(["sweep", "--ckpt", ckpt, "--aggs", "mean,bogus", "--out", str(tmp_path / "o")]) == 2
    assert not os.path.exists(tmp_path / "o")
    assert main(["train", "--dataset", "synth:n=10,wat=1", "--out", str(tmp_path / "c")]) == 2
    assert main(["inject", "--ckpt", str(tmp_path / "missing"), "--site", "weights", "--ber", "0"]) == 2
    bad = tmp_path / "bad.conf"
    bad.write_text("epochs=5\nnonsense\n")
    assert main(["--config", str(bad), "train", "--out", "x"]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["inject", "--ckpt", ckpt, "--site", "cache", "--ber", "0"])
    assert exc.value.code == 2
    assert "error" in capsys.readouterr().err


def test_read_config(tmp_path):
    p = tmp_path / "c.conf"
    p.write_text("a-b = 1\n\n--c=x # note\n")
    assert read_config(str(p)) == {"a_b": "1", "c": "x"}
    p.write_text("oops\n")
    with pytest.raises(ParseError):
        read_config(str(p))
