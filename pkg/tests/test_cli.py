import csv
import io

import pytest

from homm.cli import cli_main
from homm.config import load_config


def rows(text):
    return list(csv.DictReader(io.StringIO(text)))


@pytest.fixture
def run_dir(tiny_ini, tmp_path):
    out = tmp_path / "run"
    assert cli_main(["train", "--config", str(tiny_ini()), "--out", str(out)]) == 0
    return out


class TestOracle:
    def test_blackjack(self, capsys):
        assert cli_main(["oracle", "--game", "blackjack"]) == 0
        (row,) = rows(capsys.readouterr().out)
        assert row["variant"] == "blackjack" and row["rule"] == "rank"
        assert round(float(row["optimal_expected_reward"]), 3) == 0.592
        assert round(float(row["ignore_losers_reward"]), 3) == -0.408

    def test_all_variants_with_hands(self, capsys):
        assert cli_main(["oracle", "--hands"]) == 0
        table = rows(capsys.readouterr().out)
        assert len(table) == 40
        assert sum(k.startswith("p_") for k in table[0]) == 28
        assert sum(k.startswith("bet_") for k in table[0]) == 28

    def test_opponent_rule_and_variant(self, capsys):
        assert cli_main(["oracle", "--variant", "pairs+losers", "--rule", "opponent"]) == 0
        (row,) = rows(capsys.readouterr().out)
        assert row["variant"] == "pairs+losers" and row["rule"] == "opponent"

    def test_bad_variant(self, capsys):
        assert cli_main(["oracle", "--variant", "pairs+wild"]) == 1
        assert "error" in capsys.readouterr().err


class TestUsage:
    def test_bad_flag_exits_2(self, capsys):
        assert cli_main(["train", "--frobnicate"]) == 2
        assert "usage" in capsys.readouterr().err

    def test_unknown_subcommand(self):
        assert cli_main(["dance"]) == 2

    def test_bad_choice(self):
        assert cli_main(["train", "--out", "x", "--ablation", "no-h"]) == 2

    def test_out_required(self, capsys):
        assert cli_main(["train"]) == 2
        assert "--out" in capsys.readouterr().err

    def test_config_error_exits_1(self, tmp_path, capsys):
        bad = tmp_path / "bad.ini"
        bad.write_text("[data]\nwhatever = 1\n")
        assert cli_main(["train", "--config", str(bad), "--out", str(tmp_path / "r")]) == 1
        assert "whatever" in capsys.readouterr().err

    def test_eval_without_checkpoint(self, tiny_ini, tmp_path, capsys):
        assert cli_main(["eval", "--config", str(tiny_ini()), "--out", str(tmp_path / "none")]) == 1
        assert "checkpoint" in capsys.readouterr().err


class TestRunDirectory:
    def test_train_outputs(self, run_dir):
        for name in ("resolved-config", "metrics.csv", "checkpoint.bin"):
            assert (run_dir / name).exists()
        assert load_config(run_dir / "resolved-config").out == str(run_dir)

    def test_train_deterministic(self, tiny_ini, tmp_path):
        ini = str(tiny_ini())
        for name in ("a", "b"):
            assert cli_main(["train", "--config", ini, "--seed", "1", "--out",
                             str(tmp_path / name)]) == 0
        a = (tmp_path / "a" / "metrics.csv").read_bytes()
        assert a == (tmp_path / "b" / "metrics.csv").read_bytes()
        assert (tmp_path / "a" / "checkpoint.bin").read_bytes() == \
            (tmp_path / "b" / "checkpoint.bin").read_bytes()

    def test_seed_precedence(self, tmp_path, monkeypatch):
        monkeypatch.setenv("HOMM_SEED", "11")
        args = ["train", "--profile", "desk", "--domain", "poly", "--epochs", "0"]
        assert cli_main(args + ["--out", str(tmp_path / "env")]) == 0
        assert load_config(tmp_path / "env" / "resolved-config").seed == 11
        assert cli_main(args + ["--seed", "5", "--out", str(tmp_path / "flag")]) == 0
        assert load_config(tmp_path / "flag" / "resolved-config").seed == 5

    def test_eval(self, run_dir, capsys):
        assert cli_main(["eval", "--out", str(run_dir)]) == 0
        assert "probe_loss" in capsys.readouterr().out
        metrics = rows((run_dir / "metrics.csv").read_text())
        assert any(r["protocol"] == "meta_classification" for r in metrics)

    def test_meta_eval(self, run_dir, capsys):
        assert cli_main(["meta-eval", "--out", str(run_dir)]) == 0
        metrics = rows((run_dir / "metrics.csv").read_text())
        cells = {(r["mapping_split"], r["task_split"]) for r in metrics
                 if r["protocol"] == "meta_examples" and r["metric"] == "probe_loss"}
        assert ("trained", "trained") in cells and ("held_out", "held_out") in cells

    def test_meta_eval_language_needs_language_run(self, run_dir, capsys):
        assert cli_main(["meta-eval", "--cue", "language", "--out", str(run_dir)]) == 1
        assert "language" in capsys.readouterr().err

    def test_language_run(self, tiny_ini, tmp_path):
        out = str(tmp_path / "lang")
        assert cli_main(["train", "--config", str(tiny_ini()), "--cue", "language",
                         "--out", out]) == 0
        assert cli_main(["meta-eval", "--cue", "language", "--out", out]) == 0
        metrics = rows((tmp_path / "lang" / "metrics.csv").read_text())
        assert any(r["protocol"] == "meta_language" for r in metrics)

    def test_sweep(self, run_dir, capsys):
        assert cli_main(["sweep", "--counts", "1,4", "--out", str(run_dir)]) == 0
        out = capsys.readouterr().out
        assert "n=  1" in out and "sweep_untrained" in out

    def test_continual(self, run_dir, capsys):
        assert cli_main(["continual", "--out", str(run_dir)]) == 0
        out = capsys.readouterr().out
        for mode in ("warm", "random", "untrained-net"):
            assert mode in out
        assert "old-tasks-unchanged True" in out

    def test_integrate(self, run_dir, capsys):
        assert cli_main(["integrate", "--replay-ratio", "0", "--integrate-epochs", "1",
                         "--out", str(run_dir)]) == 0
        assert "old_task_loss" in capsys.readouterr().out

    def test_export(self, run_dir):
        assert cli_main(["export-embeddings", "--out", str(run_dir)]) == 0
        table = rows((run_dir / "embeddings.csv").read_text())
        assert {r["kind"] for r in table} == {"task", "mapping", "classification"}
        assert "z7" in table[0] and "z8" not in table[0]

    def test_ablation_run(self, tiny_ini, tmp_path):
        out = str(tmp_path / "abl")
        assert cli_main(["train", "--config", str(tiny_ini()), "--ablation", "conditioned-f",
                         "--out", out]) == 0
        assert load_config(tmp_path / "abl" / "resolved-config").ablation == "conditioned-f"
        assert cli_main(["meta-eval", "--out", out]) == 0

    def test_cards_run(self, tiny_ini, tmp_path, capsys):
        out = str(tmp_path / "cards")
        assert cli_main(["train", "--config", str(tiny_ini("cards")), "--out", out]) == 0
        assert "expected_reward" in capsys.readouterr().out
        assert cli_main(["meta-eval", "--out", out]) == 0
