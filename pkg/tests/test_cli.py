import json

import numpy as np
import pytest

from simul_ecmpc.cli import RunConfig, ConfigError, load_config, main
from simul_ecmpc.sim import read_csv


def _json(capsys, argv):
    code = main(argv)
    return code, json.loads(capsys.readouterr().out)


def test_horizons_forward(capsys):
    code, out = _json(capsys, ["horizons", "--formula", "nc", "--delta", "1", "--L", "2", "--Delta", "0.1"])
    assert code == 0 and out["N_c"] == 2
    _, out = _json(capsys, ["horizons", "--formula", "nc", "--L", "10", "--Delta", "0.1"])
    assert out["N_c"] == 23


def test_horizons_backward(capsys):
    _, out = _json(capsys, ["horizons", "--formula", "ne-ex1", "--P-inv", "0"])
    assert out["N_e"] == 16
    _, out = _json(capsys, ["horizons", "--formula", "ne-general", "--Delta", "0.1",
                            "--constants", '{"zeta": 2, "e_max": 2, "c_beta_bar": 1, "eta": 2}'])
    assert out["N_e"] == 3


def test_horizons_delta_from_tight_boxes(capsys):
    # l_wc = 15 w^2 over |w| <= 0.4 against max_u l_c = 5 u^2 at x = 0, |u| = 0.6: 4/3 >= 1
    assert main(["horizons", "--formula", "nc", "--regime", "tight"]) == 3
    assert "1.333" in capsys.readouterr().err


def test_horizons_uncontrollable_exit_code(capsys):
    assert main(["horizons", "--formula", "nc", "--Delta", "1.0"]) == 3
    assert "error" in capsys.readouterr().err


def test_horizons_errors(capsys):
    assert main(["horizons"]) == 1
    assert main(["horizons", "--formula", "ne-general", "--constants", "{bad"]) == 1
    assert main(["horizons", "--formula", "ne-ex1", "--K", "0"]) == 1
    assert "usage" in capsys.readouterr().err


def test_bad_flags_exit_with_config_code(capsys):
    with pytest.raises(SystemExit) as e:
        main(["example1", "--regime", "sideways"])
    assert e.value.code == 1
    assert "usage" in capsys.readouterr().err
    assert main(["example2", "--grid", "--Ne", "5"]) == 1
    assert main(["example1", "--Ne", "0"]) == 1


def test_omega_sweep(capsys):
    _, out = _json(capsys, ["horizons", "--sweep-omega", "--regime", "tight", "--Nc-list", "5,10",
                            "--points", "5", "--Delta", "0.1"])
    for mode in ("simultaneous", "independent"):
        assert [r["N_c"] for r in out["omega"][mode]] == [5, 10]


def test_example1_zero_steps(tmp_path):
    assert main(["example1", "--seeds", "1", "--steps", "0", "--jobs", "1", "--out", str(tmp_path)]) == 0
    meta, cols = read_csv(tmp_path / "example1-nominal-simultaneous-trial000.csv")
    assert all(len(v) == 0 for v in cols.values())


def test_example1_writes_outputs(tmp_path, capsys):
    argv = ["example1", "--seeds", "2", "--steps", "20", "--Ne", "5", "--Nc", "5", "--jobs", "1",
            "--out", str(tmp_path)]
    assert main(argv) == 0
    rep = json.loads((tmp_path / "example1-nominal-report.json").read_text())
    assert rep["config"]["seeds"] == 2
    assert set(rep["certificate"]) == {"simultaneous", "independent"}
    assert len(rep["certificate"]["simultaneous"]["theorem1_pass_fraction"]) == 2
    _, summ = read_csv(tmp_path / "example1-nominal-summary.csv")
    assert list(summ["mode"]) == ["simultaneous", "independent"]
    assert "mse" in capsys.readouterr().out


def _columns(path):
    _, cols = read_csv(path)
    cols.pop("wall_ms")
    return cols


def test_dump_config_reproduces_run(tmp_path):
    cfg_path = tmp_path / "run.json"
    base = ["example1", "--seeds", "1", "--steps", "15", "--Ne", "4", "--Nc", "4", "--mode",
            "simultaneous", "--jobs", "1", "--seed", "5"]
    assert main(base + ["--out", str(tmp_path / "a"), "--dump-config", str(cfg_path)]) == 0
    assert not (tmp_path / "a").exists()
    rc = load_config(cfg_path)
    assert rc.seed == 5 and rc.N_e == 4
    assert main(base + ["--out", str(tmp_path / "a")]) == 0
    cfg = json.loads(cfg_path.read_text())
    cfg["out"] = str(tmp_path / "b")
    cfg_path.write_text(json.dumps(cfg))
    assert main(["example1", "--config", str(cfg_path)]) == 0
    name = "example1-nominal-simultaneous-trial000.csv"
    a, b = _columns(tmp_path / "a" / name), _columns(tmp_path / "b" / name)
    for k in a:
        assert np.array_equal(a[k], b[k], equal_nan=a[k].dtype != object), k


def test_config_validation(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"command": "example1", "colour": "red"})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"command": "example1", "schema_version": 99})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"regime": "tight"})
    bad = tmp_path / "bad.json"
    bad.write_text("[1, 2]")
    assert main(["example1", "--config", str(bad)]) == 1


def test_seed_environment_variable(tmp_path, monkeypatch):
    monkeypatch.setenv("SIMUL_ECMPC_SEED", "11")
    path = tmp_path / "c.json"
    assert main(["example2", "--trials", "1", "--dump-config", str(path)]) == 0
    assert load_config(path).seed == 11
    monkeypatch.setenv("SIMUL_ECMPC_SEED", "eleven")
    assert main(["example2", "--trials", "1", "--dump-config", str(path)]) == 1


def test_example2_single_trial_is_deterministic(tmp_path):
    runs = []
    for d in ("a", "b"):
        argv = ["example2", "--trials", "1", "--seed", "7", "--steps", "15", "--Ne", "5", "--Nc", "5",
                "--jobs", "1", "--out", str(tmp_path / d)]
        assert main(argv) == 0
        _, cols = read_csv(tmp_path / d / "example2-eps0.1-summary.csv")
        runs.append(cols["mse_mean"])
        timing = (tmp_path / d / "example2-eps0.1-timing.csv").read_text().splitlines()
        assert len([ln for ln in timing if not ln.startswith("#")]) == 16
    assert np.array_equal(runs[0], runs[1])
