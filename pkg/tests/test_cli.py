import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest
from conftest import short_run_config

from flava.cli import run
from flava.config import desk_config, load_config, save_config
from flava.data import make_classification_pairs


def _error_line(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    return err[-1]


@pytest.fixture
def desk_file(tmp_path):
    cfg = short_run_config(tmp_path / "data", total=8, eval_interval=4, checkpoint_interval=4)
    path = tmp_path / "desk.toml"
    save_config(cfg, path)
    return path


def _digest(folder):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(folder.iterdir())}


def test_unknown_subcommand(capsys, tmp_path):
    assert run(["explode", "--out", str(tmp_path)]) == 2
    captured = capsys.readouterr()
    assert "usage:" in captured.err
    assert captured.err.strip().splitlines()[-1].startswith("error: usage:")


def test_unknown_flag(capsys, tmp_path):
    assert run(["verify-global-contrastive", "--out", str(tmp_path), "--wrokers", "4"]) == 2
    assert _error_line(capsys).startswith("error: usage:")


def test_out_is_required(capsys, monkeypatch):
    monkeypatch.delenv("FLAVA_OUT", raising=False)
    assert run(["verify-global-contrastive"]) == 2
    assert "--out" in _error_line(capsys)


def test_out_from_environment(monkeypatch, tmp_path):
    monkeypatch.setenv("FLAVA_OUT", str(tmp_path / "env"))
    assert run(["verify-global-contrastive", "--workers", "2", "--batch", "8"]) == 0
    assert (tmp_path / "env" / "verify.json").exists()


def test_invalid_config(capsys, tmp_path):
    assert run(["pretrain", "--out", str(tmp_path), "model.hidden_size=70"]) == 3
    line = _error_line(capsys)
    assert line.startswith("error: config:") and "hidden_size" in line
    assert run(["pretrain", "--out", str(tmp_path), "model.hiden_size=64"]) == 3


def test_missing_input(capsys, tmp_path):
    code = run(["eval", "retrieval", "--out", str(tmp_path), "--checkpoint", str(tmp_path / "no.npz"), "--data", "x"])
    assert code == 4
    assert _error_line(capsys).startswith("error: input:")
    assert run(["pretrain", "--out", str(tmp_path), "--config", str(tmp_path / "none.toml")]) == 4


def test_verify_global_contrastive(capsys, tmp_path):
    assert run(["verify-global-contrastive", "--workers", "4", "--batch", "32", "--out", str(tmp_path)]) == 0
    lines = dict(line.split("=", 1) for line in capsys.readouterr().out.splitlines())
    assert lines["global_pass"] == "True" and lines["local_pass"] == "True"
    assert float(lines["global_max_rel_grad_error"]) < 1e-6
    assert json.loads((tmp_path / "run.json").read_text())["seed"] == 0
    assert run(["verify-global-contrastive", "--workers", "3", "--batch", "32", "--out", str(tmp_path)]) == 3


def test_pretrain_twice_is_identical(desk_file, tmp_path):
    data_before = _digest(tmp_path / "data")
    for name in ("a", "b"):
        assert run(["pretrain", "--config", str(desk_file), "--seed", "7", "--out", str(tmp_path / name)]) == 0
    a = (tmp_path / "a" / "metrics.jsonl").read_text()
    assert a == (tmp_path / "b" / "metrics.jsonl").read_text()
    assert len(a.splitlines()) == 8 + 2
    assert _digest(tmp_path / "data") == data_before

    record = json.loads((tmp_path / "a" / "run.json").read_text())
    assert record["seed"] == 7
    resolved = load_config(tmp_path / "a" / "resolved_config.toml")
    assert resolved.train.seed == resolved.model.seed == 7
    # the resolved config alone reruns the command
    assert run(["pretrain", "--config", str(tmp_path / "a" / "resolved_config.toml"), "--out", str(tmp_path / "c")]) == 0
    assert (tmp_path / "c" / "metrics.jsonl").read_text() == a


def test_pretrain_resume(desk_file, tmp_path):
    assert run(["pretrain", "--config", str(desk_file), "--out", str(tmp_path / "a")]) == 0
    assert run(["pretrain", "--config", str(desk_file), "--out", str(tmp_path / "b"), "--stop-after", "4"]) == 0
    resume = str(tmp_path / "b" / "checkpoints" / "step_000004.pt")
    assert run(["pretrain", "--config", str(desk_file), "--out", str(tmp_path / "b"), "--resume", resume]) == 0
    assert (tmp_path / "a" / "metrics.jsonl").read_text() == (tmp_path / "b" / "metrics.jsonl").read_text()


@pytest.fixture
def trained(desk_file, tmp_path):
    assert run(["pretrain", "--config", str(desk_file), "--out", str(tmp_path / "run")]) == 0
    return tmp_path / "run"


def test_eval_retrieval_report(trained, tmp_path, capsys):
    capsys.readouterr()
    for ckpt in ("final.pt", "model.npz"):
        out = tmp_path / f"eval_{ckpt}"
        args = ["eval", "retrieval", "--checkpoint", str(trained / ckpt), "--data", str(tmp_path / "data" / "pairs.npz")]
        args += ["--config", str(trained / "resolved_config.toml"), "--out", str(out)]
        assert run(args) == 0
        lines = capsys.readouterr().out.splitlines()
        metrics = {dict(kv.split("=") for kv in line.split())["metric"] for line in lines}
        assert {"R@1", "R@5"} <= metrics
        records = [json.loads(line) for line in (out / "report.jsonl").read_text().splitlines()]
        assert {r["metric"] for r in records} == metrics


def test_eval_other_tasks(trained, tmp_path, capsys):
    cfg = desk_config().model
    rng = np.random.default_rng(0)
    make_classification_pairs(40, cfg, rng).save(tmp_path / "cls.npz")
    make_classification_pairs(20, cfg, rng).save(tmp_path / "cls_val.npz")
    common = ["--checkpoint", str(trained / "final.pt"), "--data", str(tmp_path / "cls.npz")]
    assert run(["eval", "zeroshot", *common, "--classes", "dark,bright", "--out", str(tmp_path / "z")]) == 0
    assert run(["eval", "probe", *common, "--val-data", str(tmp_path / "cls_val.npz"), "--out", str(tmp_path / "p")]) == 0
    assert run(["eval", "finetune", *common, "--out", str(tmp_path / "f"), "train.seed=1"]) == 0
    out = capsys.readouterr().out
    assert "task=zeroshot metric=accuracy" in out
    assert "task=probe metric=accuracy" in out
    assert "task=finetune/multimodal_cls metric=accuracy" in out
    assert run(["eval", "finetune", *common, "--recipe", "nope", "--out", str(tmp_path / "f")]) == 3


def test_tokenizer_fit(tmp_path, capsys):
    cfg = short_run_config(tmp_path / "data", n=32)
    save_config(cfg, tmp_path / "c.toml")
    args = ["tokenizer", "fit", "--config", str(tmp_path / "c.toml"), "--data", str(tmp_path / "data" / "images.npz")]
    assert run([*args, "--out", str(tmp_path / "tok"), "model.codebook_size=32"]) == 0
    from flava.tokenizer import Codebook

    cb = Codebook.load(tmp_path / "tok" / "codebook.npz")
    assert cb.size == 32 and cb.code_dim == 192
    assert load_config(tmp_path / "tok" / "resolved_config.toml").model.codebook_size == 32


def test_corpus_build(tmp_path, capsys):
    (tmp_path / "y.jsonl").write_text(
        json.dumps({"image": "a", "description": "a dog on the grass"}) + "\n"
        + json.dumps({"image": "b", "description": "no"}) + "\n"
    )
    (tmp_path / "m.json").write_text(json.dumps({"version": 1, "sources": [{"name": "yfcc", "path": "y.jsonl"}]}))
    assert run(["corpus", "build", "--sources", str(tmp_path / "m.json"), "--out", str(tmp_path / "out")]) == 0
    out = capsys.readouterr().out
    assert "stat=pairs value=1" in out and "rejected=too_short count=1" in out
    assert (tmp_path / "out" / "manifest.json").exists()
    assert run(["corpus", "build", "--sources", str(tmp_path / "none.json"), "--out", str(tmp_path / "o2")]) == 4


def test_console_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "flava.cli", "verify-global-contrastive", "--workers", "2", "--batch", "4", "--out", str(tmp_path)],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert "global_pass=True" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "flava.cli", "nope"], capture_output=True, text=True)
    assert proc.returncode == 2
    assert proc.stderr.strip().splitlines()[-1].startswith("error: usage:")
