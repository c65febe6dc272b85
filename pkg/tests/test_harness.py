import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from skillearn import cli
from skillearn.config import RunConfig, load_config, parse_text, with_values
from skillearn.errors import ConfigError
from skillearn.nas import DiscreteArch
from skillearn.runner import EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, EXIT_TOLERANCE, SWEEP_HEADER, run_experiment, sweep

QUICK = dict(iterations=4, eval_epochs=20, n_train=40, n_val=20, n_test=40, batch_size=8)
LPT_KEYS = {"iteration", "interaction", "cardinality", "testee_train_loss", "gradnorm_arch", "gradnorm_creator",
            "tester_val_loss"}


def quick(tmp_path, name="run", **kw):
    return RunConfig(**{**QUICK, **kw, "out": str(tmp_path / name)})


def read_jsonl(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


def test_defaults_round_trip_through_text():
    cfg = RunConfig()
    assert RunConfig(**parse_text(cfg.to_text())) == cfg


def test_config_file_overrides_and_env(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("mode = il  # comment\nseed = 3\nil_lam = 10\n")
    cfg = load_config(p, {"seed": "5", "K": None}, environ={})
    assert (cfg.mode, cfg.seed, cfg.il_lam, cfg.K) == ("il", 5, 10.0, 2)
    assert load_config(p, {"seed": "5"}, environ={"SKILLEARN_SEED": "9"}).seed == 9
    assert with_values(cfg, include_direct_creator_path="false").include_direct_creator_path is False


@pytest.mark.parametrize("text", ["bogus = 1\n", "seed = x\n", "seed = 1\nseed = 2\n", "just words\n",
                                  "mode = sideways\n", "lr_arch = -1\n", "hvp_radius = 0\n", "noise = nan\n"])
def test_bad_config_text(text):
    with pytest.raises(ConfigError):
        RunConfig(**parse_text(text))


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.txt", environ={})


@pytest.mark.parametrize("mode", ["lpt", "il", "jl", "baseline"])
def test_run_writes_outputs(tmp_path, mode):
    res = run_experiment(quick(tmp_path, mode=mode))
    assert res.status == EXIT_OK
    out = res.out
    for name in ("config.txt", "metrics.jsonl", "timing.jsonl", "final_arch.txt", "summary.json"):
        assert (out / name).exists()
    assert not (out / "error.json").exists()
    arch = DiscreteArch.from_text((out / "final_arch.txt").read_text())
    assert len(arch.ops) == RunConfig().n_layers
    recs = read_jsonl(out / "metrics.jsonl")
    assert [r["iteration"] for r in recs] == list(range(1, 5))
    assert len({tuple(sorted(r)) for r in recs}) == 1
    assert all("wall_time" not in r for r in recs)
    if mode == "lpt":
        assert set(recs[0]) == LPT_KEYS
    summary = json.loads((out / "summary.json").read_text())
    assert 0.0 <= summary["test_acc"] <= 1.0 and summary["mode"] == mode
    assert RunConfig(**parse_text((out / "config.txt").read_text())).mode == mode


@pytest.mark.parametrize("ablation", ["difficulty-only", "test-only"])
def test_ablations_run(tmp_path, ablation):
    res = run_experiment(quick(tmp_path, ablation=ablation))
    assert res.status == EXIT_OK
    recs = read_jsonl(res.out / "metrics.jsonl")
    assert all(0.0 < r["cardinality"] for r in recs)


def test_metrics_are_byte_identical(tmp_path):
    a = run_experiment(quick(tmp_path, "a", seed=4))
    b = run_experiment(quick(tmp_path, "b", seed=4))
    assert (a.out / "metrics.jsonl").read_bytes() == (b.out / "metrics.jsonl").read_bytes()
    assert (a.out / "final_arch.txt").read_bytes() == (b.out / "final_arch.txt").read_bytes()


def test_numeric_failure_writes_error(tmp_path):
    res = run_experiment(quick(tmp_path, lr_weights=1e300))
    assert res.status == EXIT_NUMERIC
    rec = json.loads((res.out / "error.json").read_text())
    assert rec["code"].startswith("non-finite") and rec["iteration"] == 1


def test_run_without_out_is_config_error():
    assert run_experiment(RunConfig(**QUICK)).status == EXIT_CONFIG


def test_cli_run_and_errors(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("SKILLEARN_SEED", raising=False)
    args = ["--iterations", "3", "--eval-epochs", "10", "--n-train", "30"]
    assert cli.main(["run", "--seed", "1", "--out", str(tmp_path / "r"), *args]) == EXIT_OK
    assert "test_acc=" in capsys.readouterr().out
    assert cli.main(["run", "--seed", "1", "--out", str(tmp_path / "r"), "--lr-arch", "-1"]) == EXIT_CONFIG
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["code"] == "config-error"
    assert cli.main(["run", "--seed", "1", "--out", str(tmp_path / "bad"), *args,
                     "--lr-weights", "1e300"]) == EXIT_NUMERIC
    with pytest.raises(SystemExit):
        cli.main(["run", "--out", str(tmp_path / "x")])


def test_cli_init_config(tmp_path):
    p = tmp_path / "default.txt"
    assert cli.main(["init-config", "--out", str(p)]) == EXIT_OK
    assert load_config(p, environ={}) == RunConfig()


def test_sweep_single_value_equals_run(tmp_path):
    cfg = quick(tmp_path, "sw", seed=2)
    rows, status = sweep(cfg, "lambda", [1.0])
    single = run_experiment(quick(tmp_path, "single", seed=2, lam=1.0))
    assert status == EXIT_OK
    assert rows[0]["test_acc"] == single.summary["test_acc"]
    sub = tmp_path / "sw" / "00_lambda=1.0"
    assert (sub / "metrics.jsonl").read_bytes() == (single.out / "metrics.jsonl").read_bytes()


def test_sweep_keeps_duplicates_and_header(tmp_path):
    rows, _ = sweep(quick(tmp_path, "sw", mode="il"), "gamma", [0.5, 0.5])
    with open(tmp_path / "sw" / "sweep.csv") as fh:
        table = list(csv.reader(fh))
    assert tuple(table[0]) == SWEEP_HEADER
    assert len(table) == 3 and table[1] == table[2]
    with pytest.raises(ConfigError):
        sweep(quick(tmp_path, "x"), "width", [1.0])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_sweep_continues_past_failures(tmp_path):
    rows, status = sweep(quick(tmp_path, "sw", mode="il", il_lr_weights=1e-3), "lambda", [1.0, 1e303])
    assert status == EXIT_NUMERIC
    assert rows[0]["status"] == EXIT_OK and rows[1]["status"] == EXIT_NUMERIC
    assert np.isnan(rows[1]["test_acc"])


def test_gradcheck_command(capsys):
    assert cli.main(["gradcheck", "--seed", "0"]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 8 and all(line.endswith("PASS") for line in lines)
    assert cli.main(["gradcheck", "--seed", "0", "--corrupt", "creator-hypergrad"]) == EXIT_TOLERANCE
    bad = [line for line in capsys.readouterr().out.splitlines() if line.endswith("FAIL")]
    assert len(bad) == 1 and bad[0].startswith("creator-hypergrad")
    rates = ["--lr-weights", "0", "--lr-encoder", "0", "--lr-executor", "0", "--il-lr-weights", "0",
             "--il-lr-heads", "0"]
    assert cli.main(["gradcheck", "--seed", "1", *rates]) == EXIT_OK
    assert cli.main(["gradcheck", "--seed", "0", "--dim", "6"]) == EXIT_CONFIG


def test_gen_data_is_reproducible(tmp_path):
    a, b = tmp_path / "a.npz", tmp_path / "b.npz"
    assert cli.main(["gen-data", "--seed", "3", "--out", str(a)]) == EXIT_OK
    assert cli.main(["gen-data", "--seed", "3", "--out", str(b)]) == EXIT_OK
    assert a.read_bytes() == b.read_bytes()
    with np.load(a) as z:
        assert len(z.files) > 0


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "skillearn", "init-config"], capture_output=True, text=True)
    assert res.returncode == 0 and "mode = 'lpt'" not in res.stdout and "mode = lpt" in res.stdout
