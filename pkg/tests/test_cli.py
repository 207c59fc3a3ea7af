import csv
import json

import pytest

from conftest import write_config
from deqei.cli import EXIT_FAIL, EXIT_OK, EXIT_USAGE, main
from deqei.formats import read_checkpoint, read_pgm


@pytest.fixture
def trained(tmp_path):
    cfg = write_config(tmp_path / "cfg.json", output_dir=str(tmp_path / "run"))
    assert main(["train", "--config", str(cfg)]) == EXIT_OK
    return cfg, tmp_path / "run"


def test_train_writes_hash_stamped_artifacts(trained):
    cfg, run = trained
    summary = json.loads((run / "summary.json").read_text())
    h = summary["config_hash"]
    assert (run / "history.csv").read_text().startswith(f"# config_hash={h}")
    ck = read_checkpoint(run / "checkpoint.deq1")
    assert ck.rng_position > 0 and any(k.startswith("m/") for k in ck.adam)
    assert summary["epochs"] == 2 and summary["method"] == "deq-de-prox"


def test_eval_and_dump(trained, capsys):
    cfg, run = trained
    code = main(["eval", "--config", str(cfg), "--checkpoint", str(run / "best.deq1"), "--out", str(run),
                 "--dump", "2"])
    assert code == EXIT_OK
    assert "psnr" in capsys.readouterr().out
    h = json.loads((run / "summary.json").read_text())["config_hash"]
    assert json.loads((run / "eval.json").read_text())["config_hash"] == h
    assert read_pgm(run / "recon_000.pgm").shape == (16, 16)


def test_eval_refuses_mismatched_checkpoint(trained, tmp_path, capsys):
    _, run = trained
    other = write_config(tmp_path / "other.json", seed=7)
    code = main(["eval", "--config", str(other), "--checkpoint", str(run / "checkpoint.deq1")])
    assert code == EXIT_USAGE
    assert "refusing" in capsys.readouterr().err


def test_equivariance_both_kinds(trained):
    cfg, run = trained
    for which in ("pipeline", "operator"):
        code = main(["equivariance", "--config", str(cfg), "--checkpoint", str(run / "best.deq1"),
                     "--which", which, "--out", str(run)])
        assert code == EXIT_OK
        assert (run / f"equivariance_{which}.csv").exists()


def test_resume_continues_run(tmp_path):
    cfg = write_config(tmp_path / "cfg.json", output_dir=str(tmp_path / "run"), train={"epochs": 1})
    assert main(["train", "--config", str(cfg)]) == EXIT_OK
    longer = write_config(tmp_path / "cfg2.json", output_dir=str(tmp_path / "run"), train={"epochs": 2})
    # a different epoch count is a different config: refuse
    assert main(["train", "--config", str(longer), "--checkpoint", str(tmp_path / "run/checkpoint.deq1")]) \
        == EXIT_USAGE
    assert main(["train", "--config", str(cfg), "--checkpoint", str(tmp_path / "run/checkpoint.deq1")]) == EXIT_OK


def test_report_dedupes_and_writes_csv(trained, tmp_path, capsys):
    _, run = trained
    code = main(["report", str(run), str(run), str(tmp_path / "missing"), "--out", str(tmp_path)])
    assert code == EXIT_OK
    rows = list(csv.reader((tmp_path / "report.csv").open()))
    assert rows[0][0] == "task" and len(rows) == 2
    captured = capsys.readouterr()
    assert "inpainting" in captured.out and "skipping" in captured.err


def test_gradcheck_command(tmp_path, capsys):
    cfg = write_config(tmp_path / "cfg.json", gradcheck={"instances": 1})
    assert main(["gradcheck", "--config", str(cfg)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "scalar/implicit/d-theta" in out and "FAIL" not in out


def test_gradcheck_failure_exit_code(tmp_path):
    # an absurdly small tolerance cannot be met by finite differences
    cfg = write_config(tmp_path / "cfg.json", gradcheck={"instances": 1, "tol": 1e-30})
    assert main(["gradcheck", "--config", str(cfg)]) == EXIT_FAIL


@pytest.mark.parametrize("argv", [[], ["train"], ["bogus"], ["train", "--config"]])
def test_usage_errors(argv):
    assert main(argv) == EXIT_USAGE


def test_config_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{\n "train": {"epochs": -1}\n}')
    assert main(["train", "--config", str(bad)]) == EXIT_USAGE
    assert "bad.json:2" in capsys.readouterr().err
    assert main(["train", "--config", str(tmp_path / "none.json")]) == EXIT_USAGE


def test_thread_limit_validation(tmp_path, monkeypatch):
    cfg = write_config(tmp_path / "cfg.json", train={"epochs": 0}, output_dir=str(tmp_path / "r"))
    monkeypatch.setenv("DEQEI_THREADS", "zero")
    assert main(["train", "--config", str(cfg)]) == EXIT_USAGE
    monkeypatch.setenv("DEQEI_THREADS", "1")
    assert main(["train", "--config", str(cfg)]) == EXIT_OK
    assert json.loads((tmp_path / "r/summary.json").read_text())["epochs"] == 0


def test_seed_override_changes_hash(tmp_path):
    cfg = write_config(tmp_path / "cfg.json", train={"epochs": 0})
    main(["train", "--config", str(cfg), "--out", str(tmp_path / "a")])
    main(["train", "--config", str(cfg), "--out", str(tmp_path / "b"), "--seed", "3"])
    ha = json.loads((tmp_path / "a/summary.json").read_text())["config_hash"]
    hb = json.loads((tmp_path / "b/summary.json").read_text())["config_hash"]
    assert ha != hb
