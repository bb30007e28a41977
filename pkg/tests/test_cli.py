import csv
import json

import numpy as np
import pytest

from cran_delay import cli, numerics
from cran_delay import config as cfgmod
from cran_delay.presets import PRESETS
from cran_delay.validation import LEVELS, SUITES

ONE_USER = """
[cluster]
n = 1
L = 1
lam = 1e6
sigma2 = 0.01

[experiment]
policies = fixed_power
T = 10
trials = 2
gamma = 1e-4
trace = true
"""

TWO_USER = """
[cluster]
lam = 5e5
sigma2 = 0.01

[experiment]
policies = fixed_power
T = 300
trials = 2
pilot_T = 1200
pilot_trials = 2
tune_K = 5
C_tot = 8
sweep_name = lam1
sweep_values = 4e5, 6e5
"""


@pytest.fixture
def one_user(tmp_path):
    path = tmp_path / "one.ini"
    path.write_text(ONE_USER)
    return path


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_missing_config_exits_2(tmp_path, capsys):
    assert cli.main(["simulate", "--config", str(tmp_path / "nope.ini")]) == 2
    assert "not found" in capsys.readouterr().err


def test_no_config_source_exits_2():
    assert cli.main(["simulate"]) == 2


def test_bad_value_exits_2(tmp_path):
    path = tmp_path / "bad.ini"
    path.write_text("[experiment]\nT = ten\n")
    assert cli.main(["simulate", "--config", str(path)]) == 2


def test_single_user_run_writes_artifacts(one_user, tmp_path):
    out = tmp_path / "out"
    assert cli.main(["simulate", "--config", str(one_user), "--out-dir", str(out)]) == 0
    trace = _rows(out / "trace.csv")
    assert len(trace) == 10
    assert {r["user"] for r in trace} == {"0"}
    (row,) = _rows(out / "metrics.csv")
    assert row["policy"] == "fixed_power" and float(row["mean_metric"]) > 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seeds"] == [0, 1]
    assert set(manifest["outputs"]) == {"metrics", "detail", "trace", "tuned"}


def test_manifest_rerun_is_bit_identical(one_user, tmp_path, capsys):
    out = tmp_path / "out"
    cli.main(["simulate", "--config", str(one_user), "--out-dir", str(out)])
    assert cli.main(["simulate", "--from-manifest", str(out / "manifest.json")]) == 0
    assert "bit-for-bit" in capsys.readouterr().out
    for name in ("metrics.csv", "metrics_detail.csv", "trace.csv"):
        assert (out / name).read_bytes() == (out / "rerun" / name).read_bytes()


def test_manifest_rerun_detects_changes(one_user, tmp_path):
    out = tmp_path / "out"
    cli.main(["simulate", "--config", str(one_user), "--out-dir", str(out)])
    mpath = out / "manifest.json"
    manifest = json.loads(mpath.read_text())
    manifest["config"]["experiment"]["T"] = "12"
    mpath.write_text(json.dumps(manifest))
    assert cli.main(["simulate", "--from-manifest", str(mpath)]) == 1


def test_env_override(one_user, tmp_path, monkeypatch):
    monkeypatch.setenv("CRAN_DELAY__EXPERIMENT__T", "7")
    out = tmp_path / "out"
    assert cli.main(["simulate", "--config", str(one_user), "--out-dir", str(out)]) == 0
    assert len(_rows(out / "trace.csv")) == 7


def test_env_override_unknown_key():
    with pytest.raises(cfgmod.ConfigError):
        cfgmod.apply_env({}, {"CRAN_DELAY__EXPERIMENT__NOPE": "1"})


def test_seed_flag_overrides_cluster_seed(one_user, tmp_path):
    outs = []
    for seed in ("0", "0", "5"):
        out = tmp_path / f"o{len(outs)}"
        cli.main(["simulate", "--config", str(one_user), "--seed", seed, "--out-dir", str(out),
                  "--no-plot"])
        outs.append((out / "trace.csv").read_bytes())
    assert outs[0] == outs[1] != outs[2]


def test_tuned_file_reruns_identically(tmp_path):
    cfg = tmp_path / "two.ini"
    cfg.write_text(TWO_USER)
    tuned = tmp_path / "tuned.ini"
    assert cli.main(["tune", "--config", str(cfg), "--output", str(tuned),
                     "--out-dir", str(tmp_path)]) == 0
    entries = cfgmod.read_tuned(tuned)
    assert set(entries) == {(0, "fixed_power"), (1, "fixed_power")}
    assert all(t.feasible for t in entries.values())
    runs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        assert cli.main(["simulate", "--config", str(cfg), "--tuned", str(tuned),
                         "--out-dir", str(out)]) == 0
        runs.append((out / "metrics.csv").read_bytes())
    assert runs[0] == runs[1]
    assert (tmp_path / "run0" / "metrics.svg").read_text().startswith("<svg")


def test_zero_fronthaul_target_tune_exits_3(tmp_path):
    cfg = tmp_path / "zero.ini"
    cfg.write_text(TWO_USER.replace("C_tot = 8", "C_tot = 0"))
    assert cli.main(["tune", "--config", str(cfg), "--out-dir", str(tmp_path)]) == 3


def test_tuned_file_round_trip(tmp_path):
    from cran_delay.sim import Multipliers, TuneResult
    entries = {(0, "joint"): TuneResult(Multipliers(1e-4, np.array([3e-4, 2e-4])), 9.9,
                                        np.array([0.1, 0.09]), 1234.5, 17, True),
               (3, "fixed_power"): TuneResult(Multipliers(2e-4, 0.0, np.array([0.2, 0.2])),
                                              10.1, np.array([0.1, 0.1]), 99.0, 8, False,
                                              False)}
    path = tmp_path / "t.ini"
    cfgmod.write_tuned(path, entries)
    back = cfgmod.read_tuned(path)
    assert set(back) == set(entries)
    np.testing.assert_array_equal(back[(0, "joint")].mults.mu_power, [3e-4, 2e-4])
    assert back[(0, "joint")].mults.p_fixed is None
    assert back[(3, "fixed_power")].feasible is False


def test_config_matrix_and_vector_syntax():
    run = cfgmod.load(text="[cluster]\nL = 1, 0.2; 0.2, 1\nlam = 1e6, 2e6\n", environ={})
    np.testing.assert_array_equal(run.cluster.L, [[1, 0.2], [0.2, 1]])
    np.testing.assert_array_equal(run.cluster.lam, [1e6, 2e6])


def test_presets_parse():
    for name, text in PRESETS.items():
        run = cfgmod.load(text=text, environ={})
        assert run.experiment.trials >= 20, name


def test_validate_fast_passes(capsys):
    assert cli.main(["validate", "--level", "fast"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") >= 30 and "FAIL" not in out


def test_validate_catches_a_broken_e1(monkeypatch, capsys):
    good = numerics.exp_integral_e1
    monkeypatch.setattr(numerics, "exp_integral_e1", lambda z: good(z) * (1 + 1e-6))
    assert cli.main(["validate", "--suite", "e1"]) == 1
    assert "FAIL" in capsys.readouterr().out


def test_validate_levels_and_suites():
    assert LEVELS == ("fast", "full")
    assert set(SUITES) == {"e1", "expectation", "allocator", "horizon"}


def test_lemma2_command(capsys):
    assert cli.main(["lemma2", "--trials", "5000", "--toys", "1", "--mu", "0.5"]) == 0
    assert "PASS" in capsys.readouterr().out
