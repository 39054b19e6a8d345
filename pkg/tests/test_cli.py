from __future__ import annotations

import csv
import shutil
import time

import pytest

from futurecond.cli import EXIT_FAILED, EXIT_OK, EXIT_USAGE, main, parse_seeds


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_parse_seeds():
    assert parse_seeds("0-4") == [0, 1, 2, 3, 4]
    assert parse_seeds("3,1") == [3, 1]


def test_gen_data_line_count_and_byte_identical_rerun(tmp_path):
    args = ["gen-data", "--set", "env.p=0.1", "--set", "dataset.n=1000", "--seeds", "0"]
    assert main(args + ["--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(args + ["--out", str(tmp_path / "b")]) == EXIT_OK
    a = tmp_path / "a" / "data" / "seed0.jsonl"
    b = tmp_path / "b" / "data" / "seed0.jsonl"
    assert len(a.read_text().splitlines()) == 1000
    assert a.read_bytes() == b.read_bytes()
    assert (tmp_path / "a" / "data" / "seed0.jsonl.meta").read_bytes() == \
        (tmp_path / "b" / "data" / "seed0.jsonl.meta").read_bytes()
    assert (tmp_path / "a" / "config.yaml").exists()


def test_unknown_env_is_a_usage_error(tmp_path, capsys):
    code = main(["gen-data", "--set", "env.name=mountaincar", "--out", str(tmp_path)])
    assert code == EXIT_USAGE
    err = capsys.readouterr().err
    assert "bandit" in err and "frozenlake" in err


def test_config_file_and_bad_set(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("env: {name: bandit, p: 0.4}\ndataset: {n: 7}\n")
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_OK
    assert len((tmp_path / "o" / "data" / "seed0.jsonl").read_text().splitlines()) == 7
    assert main(["gen-data", "--set", "novalue", "--out", str(tmp_path / "o")]) == EXIT_USAGE


def test_missing_dataset_names_the_path(tmp_path, capsys):
    code = main(["train", "--out", str(tmp_path), "--data", str(tmp_path / "nope.jsonl")])
    assert code == EXIT_FAILED
    assert "nope.jsonl" in capsys.readouterr().err


def test_rcsl_training_is_fast(tmp_path):
    out = str(tmp_path)
    assert main(["gen-data", "--out", out]) == EXIT_OK
    start = time.perf_counter()
    assert main(["train", "--out", out, "--set", "methods=[rcsl]"]) == EXIT_OK
    assert time.perf_counter() - start < 60


def test_train_two_methods_then_eval_five_seeds(tmp_path):
    out = str(tmp_path)
    common = ["--out", out, "--seeds", "0-4", "--set", "methods=[doc, rcsl]", "--set", "train.steps=100",
              "--set", "eval.n_rollouts=500", "--set", "dataset.n=200"]
    assert main(["gen-data"] + common) == EXIT_OK
    assert main(["train"] + common) == EXIT_OK
    ckpts = sorted(p.name for p in (tmp_path / "checkpoints").iterdir())
    assert len(ckpts) == 10 and "doc_seed0.ckpt" in ckpts and "rcsl_seed4.ckpt" in ckpts
    log_rows = read_csv(tmp_path / "logs" / "doc_seed0.csv")
    assert len(log_rows) == 100 and set(log_rows[0]) >= {"step", "nll", "contrastive", "total"}
    assert main(["eval"] + common) == EXIT_OK
    rows = read_csv(tmp_path / "results.csv")
    for method in ("doc", "rcsl"):
        mine = [r for r in rows if r["method"] == method]
        assert len(mine) == 6
        assert [r["seed"] for r in mine] == ["0", "1", "2", "3", "4", "aggregate"]
    # the bandit is enumerable, so the gap is filled from the exact value
    assert all(r["gap"] != "" and r["exact_value"] != "" for r in rows if r["method"] == "doc")
    first = (tmp_path / "results.csv").read_bytes()
    assert main(["eval"] + common) == EXIT_OK
    assert (tmp_path / "results.csv").read_bytes() == first


def test_eval_deterministic_env_rows_identical_across_seeds(tmp_path):
    out = str(tmp_path)
    # arm 1 always pays 1 and is always pulled, so the trained policy is effectively deterministic
    common = ["--out", out, "--seeds", "0", "--set", "env={name: bandit, p: 1.0}", "--set", "methods=[pct-bc]",
              "--set", "train.steps=300", "--set", "eval.n_rollouts=50", "--set", "dataset.n=20"]
    assert main(["gen-data"] + common) == EXIT_OK
    assert main(["train"] + common) == EXIT_OK
    ckpts = tmp_path / "checkpoints"
    for seed in (1, 2):
        shutil.copy(ckpts / "pct-bc_seed0.ckpt", ckpts / f"pct-bc_seed{seed}.ckpt")
    assert main(["eval"] + common[:2] + ["--seeds", "0-2"] + common[4:]) == EXIT_OK
    rows = [r for r in read_csv(tmp_path / "results.csv") if r["seed"] != "aggregate"]
    strip = lambda r: {k: v for k, v in r.items() if k != "seed"}  # noqa: E731
    assert len(rows) == 3 and strip(rows[0]) == strip(rows[1]) == strip(rows[2])
    assert rows[0]["ci95"] == "0.0"


def test_eval_missing_checkpoint(tmp_path, capsys):
    assert main(["eval", "--out", str(tmp_path)]) == EXIT_FAILED
    assert "doc_seed0.ckpt" in capsys.readouterr().err


def test_reproduce_bandit_row_count_and_determinism(tmp_path):
    quick = ["--set", "train.steps=30", "--set", "eval.n_rollouts=200", "--set", "n=100", "--deterministic"]
    assert main(["reproduce", "bandit", "--out", str(tmp_path / "a")] + quick) == EXIT_OK
    rows = read_csv(tmp_path / "a" / "bandit.csv")
    assert len([r for r in rows if r["method"] != "bayes-optimal"]) == 100
    assert len([r for r in rows if r["method"] == "bayes-optimal"]) == 5
    assert main(["reproduce", "bandit", "--out", str(tmp_path / "b")] + quick) == EXIT_OK
    assert (tmp_path / "a" / "bandit.csv").read_bytes() == (tmp_path / "b" / "bandit.csv").read_bytes()
    svg = (tmp_path / "a" / "bandit.svg").read_text()
    assert svg.startswith("<svg") or svg.startswith("<?xml")
    assert svg == (tmp_path / "b" / "bandit.svg").read_text()


def test_reproduce_timestamp_only_without_deterministic(tmp_path):
    quick = ["--set", "train.steps=5", "--set", "eval.n_rollouts=20", "--set", "n=50",
             "--set", "p_grid=[0.2]", "--seeds", "0"]
    assert main(["reproduce", "bandit", "--out", str(tmp_path)] + quick) == EXIT_OK
    assert "generated" in (tmp_path / "bandit.svg").read_text()


def test_reproduce_frozenlake_small_grid(tmp_path):
    quick = ["--set", "train.steps=5", "--set", "eval.n_rollouts=20", "--set", "n=20", "--set", "p_grid=[0.5]",
             "--set", "epsilons=[0.7]", "--seeds", "0", "--deterministic", "--jobs", "2"]
    assert main(["reproduce", "frozenlake", "--out", str(tmp_path)] + quick) == EXIT_OK
    rows = read_csv(tmp_path / "frozenlake.csv")
    assert sorted(r["method"] for r in rows) == ["bc", "doc", "dt", "vae"]
    assert all(r["epsilon"] == "0.7" for r in rows)
    assert (tmp_path / "frozenlake_eps0.7.svg").exists()


def test_reproduce_counterexample(tmp_path):
    assert main(["reproduce", "counterexample", "--out", str(tmp_path)]) == EXIT_OK
    text = (tmp_path / "counterexample.csv").read_text()
    assert "0.25" in text


def test_check_passes(tmp_path, capsys):
    assert main(["check", "--out", str(tmp_path), "--steps", "300"]) == EXIT_OK
    lines = (tmp_path / "check.txt").read_text().splitlines()
    assert lines and all(line.startswith("PASS") for line in lines)


@pytest.mark.parametrize("argv", [[], ["reproduce", "atari"]])
def test_bad_invocations_exit_2(argv):
    with pytest.raises(SystemExit) as info:
        main(argv)
    assert info.value.code == EXIT_USAGE
