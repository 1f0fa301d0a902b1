import json
import subprocess
import sys

import pytest

from etd_lab.checkpoint import load_checkpoint
from etd_lab.cli import main, resolve_config, CliError
from etd_lab.tasks import bundled_corpus_path

DATA = bundled_corpus_path().parent
TINY = {
    "model": {"d_model": 16, "n_heads": 2, "d_ff": 32, "n_layers": 4, "max_seq_len": 16},
    "task": {"kind": "mod_chain", "depth": 2, "modulus": 5, "n_train": 64, "n_test": 32},
    "train": {"steps": 3, "batch_size": 8, "warmup": 1},
}


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(TINY))
    return p


@pytest.fixture
def pretrained(tmp_path, cfg_path):
    out = tmp_path / "base.ckpt"
    assert main(["pretrain", "--config", str(cfg_path), "--out", str(out), "--log", str(tmp_path / "p.jsonl")]) == 0
    return out


def error_of(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def test_select_bundled_profile(capsys, tmp_path):
    assert main(["select", "--profile", str(DATA / "reference_profile.json"), "--out", str(tmp_path / "s.json")]) == 0
    assert capsys.readouterr().out.strip().splitlines()[-1] == "7-4*k-5"
    rep = json.loads((tmp_path / "s.json").read_text())
    assert rep["config"] == "7-4*k-5"


def test_eval_oracle_predictions(capsys, tmp_path):
    out = tmp_path / "r.json"
    assert main(["eval", "--predictions", str(DATA / "oracle_predictions.jsonl"), "--out", str(out)]) == 0
    assert json.loads(out.read_text())["accuracy"] == 1.0
    assert (tmp_path / "r.json.manifest.json").exists()


def test_pretrain_writes_manifest_and_log(pretrained, tmp_path):
    man = json.loads((tmp_path / "base.ckpt.manifest.json").read_text())
    assert man["command"] == "pretrain" and man["config"]["model"]["d_model"] == 16
    assert man["config"]["train"]["lr"] == 1e-3  # default filled in
    assert len((tmp_path / "p.jsonl").read_text().splitlines()) == 3
    assert load_checkpoint(pretrained).step == 3


def test_train_etd_k1_matches_plain_continuation(pretrained, cfg_path, tmp_path):
    a, b = tmp_path / "etd.ckpt", tmp_path / "plain.ckpt"
    assert main(["train-etd", "--config", str(cfg_path), "--ckpt", str(pretrained), "--etd", "1-2*1-1", "--out", str(a)]) == 0
    assert main(["train-etd", "--config", str(cfg_path), "--ckpt", str(pretrained), "--etd", "0-4*1-0", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert load_checkpoint(a).step == 6


def test_k1_eval_report_equals_plain(pretrained, cfg_path, tmp_path):
    reports = []
    for label in ("1-2*1-1", "0-4*1-0"):
        ck, rep = tmp_path / f"{label}.ckpt", tmp_path / f"{label}.json"
        assert main(["train-etd", "--config", str(cfg_path), "--ckpt", str(pretrained), "--etd", label, "--out", str(ck)]) == 0
        assert main(["eval", "--ckpt", str(ck), "--out", str(rep), "--task", '{"depth": 3}']) == 0
        reports.append(rep.read_bytes())
    assert reports[0] == reports[1]
    assert json.loads(reports[0])["task_accuracy"].keys() == {"mod_chain(d=3,p=5)"}


def test_profile_select_eval_pipeline(pretrained, cfg_path, tmp_path, capsys):
    prof = tmp_path / "prof.json"
    assert main(["profile", "--ckpt", str(pretrained), "--out", str(prof), "--max-sequences", "8", "--seq-len", "16",
                 "--csv", str(tmp_path / "prof.csv")]) == 0
    assert len(json.loads(prof.read_text())["distances"]) == 4
    trained = tmp_path / "k2.ckpt"
    assert main(["train-etd", "--config", str(cfg_path), "--ckpt", str(pretrained), "--etd", "1-2*k-1", "--k", "2",
                 "--out", str(trained)]) == 0
    assert load_checkpoint(trained).etd.label == "1-2*2-1"
    base_rep = tmp_path / "base.json"
    assert main(["eval", "--ckpt", str(trained), "--k", "1", "--out", str(base_rep)]) == 0
    rep = tmp_path / "rep.json"
    assert main(["eval", "--ckpt", str(trained), "--out", str(rep), "--baseline", str(base_rep)]) == 0
    r = json.loads(rep.read_text())
    assert r["etd"] == "1-2*2-1" and r["flops_layers"] == 6 and r["train_k"] == 2 and r["baseline"] == "0-4*1-0"


def test_adaptive_train_and_eval(pretrained, cfg_path, tmp_path):
    out = tmp_path / "act.ckpt"
    assert main(["train-etd", "--config", str(cfg_path), "--ckpt", str(pretrained), "--adaptive", "--partition",
                 "1-2*k-1", "--nmax", "4", "--out", str(out)]) == 0
    rep = tmp_path / "act.json"
    assert main(["eval", "--ckpt", str(out), "--out", str(rep)]) == 0
    r = json.loads(rep.read_text())
    assert r["etd"] == "1-2*act-1" and 1 <= r["adaptive"]["mean_steps"] <= 4


def test_sweep_k_writes_reports(pretrained, cfg_path, tmp_path):
    d = tmp_path / "sweep"
    assert main(["sweep", "--mode", "k", "--config", str(cfg_path), "--ckpt", str(pretrained), "--partition",
                 "1-2*k-1", "--ks", "1,2", "--seeds", "0", "--out-dir", str(d)]) == 0
    assert (d / "manifest.json").exists() and (d / "summary.csv").exists()
    assert len(list(d.glob("report_*.json"))) == 2


def test_refuses_overwrite(pretrained, cfg_path, capsys):
    assert main(["pretrain", "--config", str(cfg_path), "--out", str(pretrained)]) == 1
    assert error_of(capsys)["error"] == "output_exists"
    assert main(["pretrain", "--config", str(cfg_path), "--out", str(pretrained), "--force"]) == 0


def test_error_objects(tmp_path, capsys):
    assert main(["eval", "--ckpt", str(tmp_path / "missing.ckpt"), "--out", str(tmp_path / "o.json")]) == 1
    assert error_of(capsys)["error"] == "file_not_found"
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"model": {"depth": 3}}))
    assert main(["pretrain", "--config", str(bad), "--out", str(tmp_path / "x.ckpt")]) == 2
    assert error_of(capsys)["error"] == "config_error"
    flat = tmp_path / "flat.json"
    flat.write_text(json.dumps({"gap": 1, "distances": [0.5, 0.4, 0.3, 0.2, 0.1], "sample_count": 1}))
    assert main(["select", "--profile", str(flat)]) == 1
    err = error_of(capsys)
    assert err["error"] == "selection_error" and "knee" in err["message"]
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"garbage!" * 4)
    assert main(["eval", "--ckpt", str(junk), "--out", str(tmp_path / "j.json")]) == 1
    assert error_of(capsys)["error"] == "checkpoint_error"


def test_resolve_config_defaults():
    cfg = resolve_config({"train": {"steps": 5}})
    assert cfg["train"]["steps"] == 5 and cfg["train"]["beta2"] == 0.95
    with pytest.raises(CliError):
        resolve_config({"bogus": {}})


def test_console_entry_point():
    r = subprocess.run([sys.executable, "-m", "etd_lab.cli", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.startswith("etd-lab ")
