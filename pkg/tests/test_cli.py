import json
import logging

import pytest

from guidedmt import cli
from guidedmt.data import load_dataset

TINY = {
    "data": {"n_lexemes": 2, "n_parallel": 8, "n_monolingual": 8, "n_contrastive": 3, "n_text": 30, "n_dev": 4,
             "d_local": 8, "d_global": 16, "signal_dims_local": 4, "signal_dims_global": 8},
    "model": {"d_model": 16, "n_heads": 2, "d_ffn": 32, "adapter_reduction": 4},
    "backbone": {"steps": 5, "batch_size": 8},
    "train": {"max_steps": 6, "eval_every": 3, "batch_size": 4, "lr": 1e-3},
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(TINY))
    return str(path)


@pytest.fixture
def trained(tmp_path, config):
    data, run = tmp_path / "data", tmp_path / "run"
    assert cli.run(["gen-data", "--config", config, "--seed", "3", "--out", str(data)]) == 0
    assert cli.run(["train", "--config", config, "--seed", "3", "--dataset", str(data), "--out", str(run)]) == 0
    return data, run


def test_no_arguments_is_usage_error(capsys):
    assert cli.run([]) == cli.EXIT_USAGE
    assert "usage" in capsys.readouterr().err


def test_unknown_flag_and_missing_required(capsys):
    assert cli.run(["gen-data", "--out", "x", "--bogus"]) == cli.EXIT_USAGE
    assert cli.run(["train", "--out", "x"]) == cli.EXIT_USAGE
    assert cli.run(["no-such-command"]) == cli.EXIT_USAGE


def _help(argv, capsys):
    assert cli.run(argv + ["--help"]) == 0
    return capsys.readouterr().out


def test_help_documents_every_flag(capsys):
    parser = cli.build_parser()
    subparsers = next(a for a in parser._actions if a.dest == "command").choices
    assert set(subparsers) == {"gen-data", "train", "translate", "eval-contrastive", "eval-bleu",
                               "inspect-attention", "ablate"}
    top = _help([], capsys)
    assert cli.LOG_ENV in top
    for name, sub in subparsers.items():
        text = _help([name], capsys)
        for action in sub._actions:
            for flag in action.option_strings:
                assert flag in text, (name, flag)
            if action.option_strings and action.dest != "help":
                assert action.help and action.help.split()[0] in text, (name, action.dest)
    spec_flags = {"--config", "--seed", "--out", "--dataset", "--checkpoint", "--preset"}
    seen = {f for sub in subparsers.values() for a in sub._actions for f in a.option_strings}
    assert spec_flags <= seen


def test_default_gen_data_has_155_items(tmp_path, capsys):
    cfg = tmp_path / "small.json"
    # default lexicon and contrastive size; shrink only the bulk sets
    cfg.write_text(json.dumps({"data": {"n_parallel": 20, "n_monolingual": 20, "n_text": 20, "n_dev": 2}}))
    assert cli.run(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 0
    assert len(load_dataset(tmp_path / "d" / "contrastive.jsonl", "contrastive")) == 155
    assert "155 contrastive" in capsys.readouterr().out


def test_pipeline(trained, tmp_path, capsys):
    data, run = trained
    assert (run / "model.ckpt").exists() and (run / "backbone.ckpt").exists()
    metrics = [json.loads(l) for l in (run / "metrics.jsonl").read_text().splitlines()]
    assert len(metrics) == 6 and all("objective" in m and "loss" in m for m in metrics)
    ckpt = str(run / "model.ckpt")

    report = tmp_path / "report.jsonl"
    assert cli.run(["eval-contrastive", "--checkpoint", ckpt, "--dataset", str(data / "contrastive.jsonl"),
                    "--out", str(report)]) == 0
    summary = json.loads(report.read_text().splitlines()[-1])["summary"]
    assert summary["total"] == 6 and summary["failed"] == []

    out = tmp_path / "hyp.txt"
    assert cli.run(["translate", "--checkpoint", ckpt, "--dataset", str(data / "dev.jsonl"), "--out", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 4

    capsys.readouterr()
    assert cli.run(["eval-bleu", "--checkpoint", ckpt, "--dataset", str(data / "dev.jsonl")]) == 0
    bleu = json.loads(capsys.readouterr().out)
    assert 0 <= bleu["bleu"] <= 100 and bleu["sentences"] == 4

    att = tmp_path / "att.json"
    assert cli.run(["inspect-attention", "--checkpoint", ckpt, "--dataset", str(data / "parallel.jsonl"),
                    "--example", "1", "--out", str(att)]) == 0
    res = json.loads(att.read_text())
    n = len(res["labels"])
    assert len(res["scores"]) == n and res["labels"][-1] == "<global>"
    assert cli.run(["inspect-attention", "--checkpoint", ckpt, "--dataset", str(data / "parallel.jsonl"),
                    "--example", "99"]) == cli.EXIT_VALIDATION


def test_train_from_given_backbone_and_preset(trained, tmp_path, config):
    data, run = trained
    out = tmp_path / "run2"
    assert cli.run(["train", "--config", config, "--dataset", str(data), "--out", str(out),
                    "--checkpoint", str(run / "backbone.ckpt"), "--preset", "no-global"]) == 0
    assert not (out / "backbone.ckpt").exists()
    assert cli.run(["eval-contrastive", "--checkpoint", str(out / "model.ckpt"),
                    "--dataset", str(data / "contrastive.jsonl"), "--out", str(tmp_path / "r.jsonl")]) == 0


def test_ablate(trained, tmp_path, config, capsys):
    data, run = trained
    out = tmp_path / "ablate.jsonl"
    assert cli.run(["ablate", "--config", config, "--dataset", str(data), "--checkpoint", str(run / "backbone.ckpt"),
                    "--preset", "default,no-vmlm,full-attention", "--out", str(out)]) == 0
    table = capsys.readouterr().out
    assert "no-vmlm" in table and "full-attention" in table
    assert len(out.read_text().splitlines()) == 3
    assert cli.run(["ablate", "--dataset", str(data), "--preset", "nope"]) == cli.EXIT_VALIDATION


def test_error_exit_codes(tmp_path, config, trained):
    data, run = trained
    assert cli.run(["train", "--dataset", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == cli.EXIT_IO
    assert cli.run(["eval-contrastive", "--checkpoint", str(tmp_path / "nope.ckpt"),
                    "--dataset", str(data / "contrastive.jsonl")]) == cli.EXIT_IO
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"learning_rate": 1}}))
    assert cli.run(["gen-data", "--config", str(bad), "--out", str(tmp_path / "x")]) == cli.EXIT_VALIDATION
    # a corrupted contrastive file fails validation with a line number
    broken = tmp_path / "c.jsonl"
    broken.write_text((data / "contrastive.jsonl").read_text().splitlines()[0] + "\n{oops\n")
    assert cli.run(["eval-contrastive", "--checkpoint", str(run / "model.ckpt"),
                    "--dataset", str(broken)]) == cli.EXIT_VALIDATION


def test_divergence_exit_code(tmp_path, monkeypatch, trained):
    data, run = trained

    def boom(*a, **k):
        raise cli.DivergenceError("non-finite loss at step 1")

    monkeypatch.setattr(cli, "train", boom)
    assert cli.run(["train", "--dataset", str(data), "--out", str(tmp_path / "o"),
                    "--checkpoint", str(run / "backbone.ckpt")]) == cli.EXIT_DIVERGENCE


def test_log_level_env(monkeypatch, tmp_path, config):
    monkeypatch.setenv(cli.LOG_ENV, "DEBUG")
    assert cli.run(["gen-data", "--config", config, "--out", str(tmp_path / "d")]) == 0
    assert logging.getLogger().level == logging.DEBUG


def test_train_without_dev_split(tmp_path):
    cfg = tmp_path / "nodev.json"
    cfg.write_text(json.dumps({**TINY, "data": {**TINY["data"], "n_dev": 0}}))
    data, run = tmp_path / "data", tmp_path / "run"
    assert cli.run(["gen-data", "--config", str(cfg), "--out", str(data)]) == 0
    assert not (data / "dev.jsonl").exists()
    assert cli.run(["train", "--config", str(cfg), "--dataset", str(data), "--out", str(run)]) == 0
    assert any("dev_bleu" in json.loads(l) for l in (run / "metrics.jsonl").read_text().splitlines())
