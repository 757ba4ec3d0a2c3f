import json

import pytest

from slint import config as cfgmod
from slint.cli import build_parser, main
from slint.data import FIXTURE_CONFIG


def run(tmp_path, name, *args):
    out = tmp_path / name
    rc = main([*args, "--data", "fixture", "--config", str(FIXTURE_CONFIG), "--out", str(out)])
    return rc, out


def test_stats_writes_counts_and_manifest(tmp_path, capsys):
    rc, out = run(tmp_path, "s", "stats")
    assert rc == 0
    stats = json.loads((out / "stats.json").read_text())
    assert (stats["entities"], stats["relations"], stats["train"], stats["valid"], stats["test"]) == (6, 2, 8, 2, 2)
    man = json.loads((out / "manifest.json").read_text())
    assert man["command"] == "stats" and man["seed"] == 7
    assert set(man["dataset_hashes"]) == {"train", "valid", "test"}
    assert "entities\t6" in capsys.readouterr().out


def test_train_twice_is_byte_identical_then_eval(tmp_path):
    rc_a, a = run(tmp_path, "a", "train")
    rc_b, b = run(tmp_path, "b", "train")
    assert rc_a == rc_b == 0
    assert (a / "metrics.jsonl").read_bytes() == (b / "metrics.jsonl").read_bytes()
    assert (a / "embeddings.txt").read_bytes() == (b / "embeddings.txt").read_bytes()
    rc, ev = run(tmp_path, "e", "eval", "--checkpoint", str(a / "checkpoint.pt"))
    assert rc == 0
    rows = [json.loads(x) for x in (ev / "metrics.jsonl").read_text().splitlines()]
    assert rows[0]["slice"] == "all" and 0 < rows[0]["mrr"] <= 1


def test_train_kge_and_eval_embeddings(tmp_path):
    rc, out = run(tmp_path, "k", "train-kge")
    assert rc == 0
    rc, ev = run(tmp_path, "ke", "eval", "--embeddings", str(out / "embeddings.txt"), "--split", "valid")
    assert rc == 0
    kge = json.loads((out / "metrics.jsonl").read_text().splitlines()[0])
    again = json.loads((ev / "metrics.jsonl").read_text().splitlines()[0])
    assert kge["split"] == "test" and again["n_queries"] == 4


def test_ablate_emits_four_configurations(tmp_path):
    rc, out = run(tmp_path, "ab", "ablate", "--epochs", "1")
    assert rc == 0
    rows = [json.loads(x) for x in (out / "results.jsonl").read_text().splitlines()]
    assert [r["config"] for r in rows] == ["full", "-SGNE", "-DHCL", "-GDDI"]
    assert len((out / "results.csv").read_text().splitlines()) == 5


def test_sweep_values_parsed(tmp_path):
    rc, out = run(tmp_path, "sw", "sweep", "--param", "k_s", "--values", "1,2", "--epochs", "1", "--no-gddi")
    assert rc == 0
    assert [json.loads(x)["k_s"] for x in (out / "results.jsonl").read_text().splitlines()] == [1, 2]


def test_failures_exit_nonzero(tmp_path, capsys):
    rc, _ = run(tmp_path, "x", "eval")
    assert rc == 1 and "needs --checkpoint" in capsys.readouterr().err
    assert main(["stats", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "y")]) == 1
    assert main(["stats", "--data", "fixture", "--lambda", "-1", "--out", str(tmp_path / "z")]) == 1
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["stats"])
    assert exc.value.code == 2


def test_help_mentions_env_prefix(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0
    assert "SLINT_" in capsys.readouterr().out
    assert "ablate" in build_parser().format_help()


def test_precedence_cli_over_env_over_file(tmp_path):
    cfg_file = tmp_path / "c.yaml"
    cfg_file.write_text("k_s: 2\nlambda: 0.1\nepochs: 4\ndata: fixture\n")
    env = {"SLINT_K_S": "3", "SLINT_LAMBDA": "0.2", "SLINT_SGNE": "off", "SLINT_BENCHMARKS": "/nowhere", "HOME": "/x"}
    cfg, run_keys = cfgmod.resolve({"k_s": 4, "lam": None}, cfg_file, env)
    assert (cfg.k_s, cfg.lam, cfg.epochs, cfg.sgne) == (4, 0.2, 4, False)
    assert run_keys == {"data": "fixture"}
    with pytest.raises(ValueError, match="unknown key"):
        cfgmod.read_env({"SLINT_NOT_A_KEY": "1"})
    with pytest.raises(ValueError):
        cfgmod.read_env({"SLINT_EPOCHS": "1.5"})


def test_env_reaches_the_cli(tmp_path, monkeypatch):
    monkeypatch.setenv("SLINT_SEED", "123")
    rc, out = run(tmp_path, "env", "stats")
    assert rc == 0
    assert json.loads((out / "manifest.json").read_text())["seed"] == 123
