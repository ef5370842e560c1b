import json
import math
from dataclasses import replace

import numpy as np
import pytest
from scipy.optimize import brentq

from metastack.config import SCHEMES, default_config
from metastack.experiments import (CSV_HEADER, ExperimentResult, SchemeId, UnreachableTargetError,
                                   precoder_effective, required_power_at_ber, result_csv, run_experiment,
                                   write_result)
from metastack.metrics import BerCurve, qpsk_awgn_oracle


def tiny_capacity(**sweep):
    cfg = default_config("attenuation_ratio")
    return replace(cfg, schemes=replace(cfg.schemes, layer_rows=3, layer_cols=3),
                   sweep=replace(cfg.sweep, values=(0.0, 0.1, 0.2, 0.3), realizations=2, **sweep),
                   optimizer=replace(cfg.optimizer, max_iters=15, restarts=2))


def tiny_ber():
    cfg = default_config("tx_power_dbm")
    return replace(cfg, schemes=replace(cfg.schemes, include=("MIMO_DIGITAL", "SIM_1L", "MFSIM_2L")),
                   sweep=replace(cfg.sweep, values=(0.0, 10.0, 20.0), realizations=2, max_symbols=20_000,
                                 batch_symbols=10_000),
                   optimizer=replace(cfg.optimizer, max_iters=15, restarts=1))


@pytest.fixture(scope="module")
def capacity_result():
    cfg = tiny_capacity()
    return cfg, run_experiment(cfg)


def test_scheme_ids_are_the_closed_set():
    assert [s.value for s in SchemeId] == list(SCHEMES)
    assert [s.layers for s in SchemeId] == [0, 1, 4, 7, 2, 2]


def test_capacity_result_shape(capacity_result):
    cfg, res = capacity_result
    assert set(res.per_scheme_series) == {SchemeId(s) for s in cfg.schemes.include}
    for v in res.per_scheme_series.values():
        assert v.shape == (4,)
    assert res.config_digest == cfg.digest()
    assert res.realizations == 2 and res.master_seed == cfg.seeds.master_seed


def test_mimo_constant_and_sim_non_increasing(capacity_result):
    _, res = capacity_result
    mimo = res.series("MIMO_DIGITAL")
    assert np.all(mimo == mimo[0])
    for s in SCHEMES[1:]:
        assert np.all(np.diff(res.series(s)) <= 0), s


def test_capacity_run_is_reproducible(capacity_result):
    cfg, res = capacity_result
    again = run_experiment(cfg)
    assert result_csv(again) == result_csv(res)


def test_workers_do_not_change_bytes():
    cfg = replace(tiny_capacity(), schemes=replace(tiny_capacity().schemes, include=("SIM_1L", "FILM_2L")))
    assert result_csv(run_experiment(cfg, workers=1)) == result_csv(run_experiment(cfg, workers=2))


def test_seed_changes_results(capacity_result):
    cfg, res = capacity_result
    assert result_csv(run_experiment(cfg.with_seed(99))) != result_csv(res)


def test_csv_format(capacity_result):
    cfg, res = capacity_result
    text = result_csv(res)
    lines = text.split("\n")
    assert lines[0] == ",".join(CSV_HEADER)
    assert "\r" not in text and text.endswith("\n")
    rows = [l.split(",") for l in lines[1:-1]]
    assert len(rows) == 4 * len(SCHEMES)
    for r in rows:
        assert r[2] == "capacity_bps_hz" and r[4] == "2" and r[5] == str(cfg.seeds.master_seed)
        assert float(repr(float(r[3]))) == float(r[3])        # full precision round trip


def test_write_result_and_metadata(tmp_path, capacity_result):
    cfg, res = capacity_result
    csv_path, meta_path = write_result(res, cfg, tmp_path, seed_override=None)
    assert csv_path.read_bytes() == result_csv(res).encode("utf-8")
    meta = json.loads(meta_path.read_text())
    assert meta["config_digest"] == cfg.digest()
    assert meta["config"] == json.loads(cfg.canonical())
    assert meta["version"]
    assert "power_allocation" in meta["model"] and "ber_receiver" in meta["model"]


def test_ber_run_small():
    cfg = tiny_ber()
    res = run_experiment(cfg)
    assert res.metric == "ber"
    for s, v in res.per_scheme_series.items():
        assert v.shape == (3,) and np.all((v >= 0) & (v <= 0.5))
        assert np.all(res.symbols[s] > 0)
    # digital zero forcing is interference free, so more power never hurts
    mimo = res.series("MIMO_DIGITAL")
    assert mimo[0] > mimo[-1]
    assert result_csv(run_experiment(cfg, workers=2)) == result_csv(res)


def test_mimo_and_mfsim_precoders_are_interference_free():
    cfg = tiny_ber()
    for scheme in (SchemeId.MIMO_DIGITAL, SchemeId.MFSIM_2L):
        E, resid = precoder_effective(cfg, scheme, 0)
        off = np.abs(E - np.diag(np.diag(E)))
        assert off.max() < 1e-10 * np.abs(np.diag(E)).min()
        assert resid < 1e-12


def test_wrong_sweep_kind_rejected():
    from metastack.experiments import run_ber_vs_power, run_capacity_vs_attenuation
    with pytest.raises(ValueError):
        run_ber_vs_power(default_config())
    with pytest.raises(ValueError):
        run_capacity_vs_attenuation(default_config("tx_power_dbm"))


def test_result_rejects_mismatched_series():
    with pytest.raises(ValueError):
        ExperimentResult("x", [0, 1], {SchemeId.SIM_1L: [1.0]}, 1, 0, "d")


# --- required power ------------------------------------------------------

def curve(p, b, n=10 ** 6):
    return BerCurve(np.asarray(p, float), np.asarray(b, float), np.full(len(p), n))


def test_required_power_exact_grid_point():
    assert required_power_at_ber(curve([0, 2, 4], [1e-3, 1e-5, 1e-7]), 1e-5) == 2.0


def test_required_power_interpolates_between_brackets():
    p = required_power_at_ber(curve([0, 2, 4], [1e-3, 1e-4, 1e-6]), 1e-5)
    assert p == pytest.approx(3.0)


def test_required_power_zero_ber_uses_resolution():
    # a silent point counts as BER 1/(2 n) = 5e-7, so the crossing lies inside the interval
    p = required_power_at_ber(curve([0, 2], [1e-3, 0.0]), 1e-5)
    expected = 2 * (math.log10(1e-3) - math.log10(1e-5)) / (math.log10(1e-3) - math.log10(5e-7))
    assert p == pytest.approx(expected)


def test_required_power_unreachable():
    with pytest.raises(UnreachableTargetError):
        required_power_at_ber(curve([0, 2], [1e-2, 1e-3]), 1e-5)


def test_required_power_against_analytic_oracle_curve():
    p = np.arange(0.0, 16.0, 2.0)
    est = required_power_at_ber(curve(p, qpsk_awgn_oracle(10 ** (p / 10))), 1e-5)
    exact = brentq(lambda q: math.log10(qpsk_awgn_oracle(10 ** (q / 10))) + 5, 0, 14)
    assert abs(est - exact) < 0.1
