from dataclasses import replace

import numpy as np
import pytest

from metastack import architectures
from metastack.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION, main, read_targets
from metastack.config import default_config, dumps_toml


def tiny_toml(tmp_path, **edits):
    cfg = default_config("attenuation_ratio")
    cfg = replace(cfg, schemes=replace(cfg.schemes, include=("MIMO_DIGITAL", "SIM_1L"), layer_rows=3, layer_cols=3),
                  sweep=replace(cfg.sweep, values=(0.0, 0.2), realizations=2),
                  optimizer=replace(cfg.optimizer, max_iters=10, restarts=1))
    path = tmp_path / "tiny.toml"
    path.write_text(dumps_toml(cfg))
    return path


def test_help_and_version_exit_zero(capsys):
    assert main(["--version"]) == EXIT_OK
    assert "metastack" in capsys.readouterr().out


@pytest.mark.parametrize("argv", [[], ["run"], ["bogus"], ["sweep", "neither"], ["run", "--config", "x", "--seed", "-1"],
                                  ["run", "--config", "x", "--workers", "0"]])
def test_usage_errors_exit_two(argv):
    assert main(argv) == EXIT_CONFIG


def test_unknown_key_exits_two_naming_path(tmp_path, capsys):
    path = tiny_toml(tmp_path)
    path.write_text(path.read_text().replace("[sweep]", "[sweep]\nbogus_key = 1"))
    assert main(["run", "--config", str(path), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "sweep.bogus_key" in capsys.readouterr().err


def test_missing_config_exits_two(tmp_path):
    assert main(["run", "--config", str(tmp_path / "absent.toml")]) == EXIT_CONFIG


def test_sweep_rejects_mismatched_study(tmp_path, capsys):
    path = tiny_toml(tmp_path)
    assert main(["sweep", "ber", "--config", str(path), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert "sweep.parameter" in capsys.readouterr().err


def test_run_is_byte_identical(tmp_path):
    path = tiny_toml(tmp_path)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", "--config", str(path), "--out", str(a)]) == EXIT_OK
    assert main(["run", "--config", str(path), "--out", str(b), "--workers", "2"]) == EXIT_OK
    (csv_a,), (csv_b,) = list(a.glob("*.csv")), list(b.glob("*.csv"))
    assert csv_a.read_bytes() == csv_b.read_bytes()
    assert len(list(a.glob("*.json"))) == 1


def test_seed_override_changes_output(tmp_path):
    path = tiny_toml(tmp_path)
    main(["run", "--config", str(path), "--out", str(tmp_path / "a")])
    main(["run", "--config", str(path), "--out", str(tmp_path / "b"), "--seed", "7"])
    (csv_a,), (csv_b,) = list((tmp_path / "a").glob("*.csv")), list((tmp_path / "b").glob("*.csv"))
    assert csv_a.read_bytes() != csv_b.read_bytes()
    assert ",7\n" in csv_b.read_text()


def test_runtime_failure_exits_three(tmp_path, monkeypatch):
    import metastack.experiments as ex

    def boom(*a, **k):
        raise FloatingPointError("non-finite objective")
    monkeypatch.setattr(ex, "run_experiment", boom)
    assert main(["run", "--config", str(tiny_toml(tmp_path)), "--out", str(tmp_path)]) == EXIT_RUNTIME


# --- synthesize ----------------------------------------------------------

def read_phases(path):
    rows = path.read_text().strip().split("\n")
    assert rows[0] == "index,theta_a,theta_b,phi"
    return np.array([[float(v) for v in r.split(",")[1:]] for r in rows[1:]])


def test_synthesize_unit_targets_give_zero_phases(tmp_path, capsys):
    t = tmp_path / "t.txt"
    t.write_text("1 0\n" * 4)
    assert main(["synthesize", str(t), "--out", str(tmp_path)]) == EXIT_OK
    assert np.all(read_phases(tmp_path / "mfsim_phases.csv") == 0.0)
    assert "round-trip max residual" in capsys.readouterr().out


def test_synthesize_round_trip_random_targets(tmp_path, capsys):
    rng = np.random.default_rng(3)
    t = rng.uniform(0, 1, 50) * np.exp(1j * rng.uniform(-np.pi, np.pi, 50))
    f = tmp_path / "t.txt"
    f.write_text("# random\n" + "\n".join(f"{float(v.real)!r} {float(v.imag)!r}" for v in t) + "\n")
    assert main(["synthesize", str(f), "--out", str(tmp_path)]) == EXIT_OK
    ph = read_phases(tmp_path / "mfsim_phases.csv")
    g = np.exp(1j * ph[:, 2]) * (np.exp(1j * ph[:, 0]) + np.exp(1j * ph[:, 1])) / 2
    assert np.abs(g - t).max() < 1e-12
    resid = float(capsys.readouterr().out.rsplit(":", 1)[1])
    assert resid < 1e-12


def test_synthesize_infeasible_exits_two_naming_index(tmp_path, capsys):
    f = tmp_path / "t.txt"
    f.write_text("0.5 0\n1.2 0\n(0.3+0.1j)\n")
    assert main(["synthesize", str(f), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert "[1]" in capsys.readouterr().err
    assert not (tmp_path / "mfsim_phases.csv").exists()


@pytest.mark.parametrize("text", ["", "# only a comment\n", "1 2 3 x\n", "nan 0\n"])
def test_read_targets_rejects_bad_input(tmp_path, text):
    from metastack.cli import InputError
    f = tmp_path / "t.txt"
    f.write_text(text)
    with pytest.raises(InputError):
        read_targets(f)


def test_read_targets_formats(tmp_path):
    f = tmp_path / "t.txt"
    f.write_text("0.5 -0.25\n0.1,0.2\n(0.3-0.4j)\n\n0.7  # trailing comment\n")
    assert np.allclose(read_targets(f), [0.5 - 0.25j, 0.1 + 0.2j, 0.3 - 0.4j, 0.7])


# --- validate ------------------------------------------------------------

def test_validate_subset_passes(capsys):
    assert main(["validate", "--only", "phase_unitarity", "gradient_sim_1l", "zf_interference"]) == EXIT_OK
    assert capsys.readouterr().out.count("PASS") == 3


def test_validate_unknown_check_exits_two():
    assert main(["validate", "--only", "no_such_check"]) == EXIT_CONFIG


def test_validate_detects_gradient_bug(monkeypatch, capsys):
    honest = architectures.ConventionalModel.pullback

    def sign_flipped(self, cache, Gbar):
        g = honest(self, cache, Gbar)
        return np.concatenate([-g[..., :1], g[..., 1:]], axis=-1) * 1.05
    monkeypatch.setattr(architectures.ConventionalModel, "pullback", sign_flipped)
    assert main(["validate", "--only", "gradient_sim_4l", "phase_unitarity"]) == EXIT_VALIDATION
    out = capsys.readouterr().out
    assert "FAIL  gradient_sim_4l" in out and "PASS  phase_unitarity" in out


@pytest.mark.slow
def test_validate_full_suite_passes():
    assert main(["validate"]) == EXIT_OK
