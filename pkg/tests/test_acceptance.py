"""Acceptance suite: one printed PASS/FAIL line per criterion.

Criteria 1 to 6 are exact checks.  Criteria 7 to 10 share one run of each
default study (capacity versus attenuation, BER versus power), and criterion
11 times those two runs.  Run with ``pytest tests/test_acceptance.py -v``.
"""
import math
import os
import time
from dataclasses import replace

import numpy as np
import pytest

from metastack.config import default_config
from metastack.experiments import UnreachableTargetError, required_power_at_ber, result_csv, run_experiment
from metastack.validate import (check_awgn_oracle, check_brute_force_cascade, check_gradient,
                                check_mfsim_round_trip, check_phase_unitarity)

WORKERS = os.cpu_count() or 1
SIM = ("SIM_1L", "SIM_4L", "SIM_7L", "MFSIM_2L", "FILM_2L")


def report(capsys, number, ok, detail):
    with capsys.disabled():
        print(f"\ncriterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def crossing(alphas, a, b):
    """First alpha at which series ``a`` drops below ``b``, linearly interpolated; None if never."""
    d = np.asarray(a) - np.asarray(b)
    if d[0] < 0:
        return float(alphas[0])
    for i in range(d.size - 1):
        if d[i] >= 0 > d[i + 1]:
            return float(alphas[i] + (alphas[i + 1] - alphas[i]) * d[i] / (d[i] - d[i + 1]))
    return None


def degradation_slope(alphas, series):
    return float((series[0] - series[-1]) / (alphas[-1] - alphas[0]))


@pytest.fixture(scope="session")
def capacity_study():
    t = time.perf_counter()
    res = run_experiment(default_config("attenuation_ratio"), workers=WORKERS)
    return res, time.perf_counter() - t


@pytest.fixture(scope="session")
def ber_study():
    t = time.perf_counter()
    res = run_experiment(default_config("tx_power_dbm"), workers=WORKERS)
    return res, time.perf_counter() - t


def test_criterion_01_unitarity(capsys):
    ok, detail = check_phase_unitarity(1000)
    report(capsys, 1, ok, detail)


def test_criterion_02_mfsim_round_trip(capsys):
    ok, detail = check_mfsim_round_trip(1000)
    report(capsys, 2, ok, detail + " (|t| = 0 and |t| = 1 included)")


def test_criterion_03_gradient_oracle(capsys):
    out = {k: check_gradient(k, points=100) for k in ("SIM_1L", "SIM_4L", "SIM_7L", "MFSIM", "FILM")}
    ok = all(v[0] for v in out.values())
    worst = max(float(v[1].split("= ")[1].split()[0]) for v in out.values())
    report(capsys, 3, ok, f"worst relative error {worst:.2e} over 100 points x 5 architectures "
                          f"({', '.join(k for k, v in out.items() if not v[0]) or 'none failing'})")


def test_criterion_04_brute_force(capsys):
    ok, detail = check_brute_force_cascade()
    report(capsys, 4, ok, detail + " (layers <= 3, atoms <= 3)")


def test_criterion_05_awgn_oracle(capsys):
    ok, detail = check_awgn_oracle()
    report(capsys, 5, ok, detail)


def test_criterion_06_determinism(capsys):
    cap = default_config("attenuation_ratio")
    cap = replace(cap, schemes=replace(cap.schemes, layer_rows=4, layer_cols=4),
                  sweep=replace(cap.sweep, values=(0.0, 0.15, 0.3), realizations=3),
                  optimizer=replace(cap.optimizer, max_iters=20, restarts=2))
    ber = default_config("tx_power_dbm")
    ber = replace(ber, schemes=replace(ber.schemes, include=("MIMO_DIGITAL", "SIM_1L", "MFSIM_2L", "FILM_2L")),
                  sweep=replace(ber.sweep, values=(0.0, 20.0), realizations=2, max_symbols=40_000,
                                batch_symbols=10_000),
                  optimizer=replace(ber.optimizer, max_iters=20, restarts=1))
    mismatches = []
    for name, cfg in (("capacity", cap), ("ber", ber)):
        ref = result_csv(run_experiment(cfg, workers=1))
        for w in (1, 2, 3):
            if result_csv(run_experiment(cfg, workers=w)) != ref:
                mismatches.append(f"{name}/workers={w}")
    report(capsys, 6, not mismatches, "byte-identical CSV for repeated runs with 1, 2 and 3 workers"
           if not mismatches else f"differs: {mismatches}")


def test_criterion_07_capacity_shape(capsys, capacity_study):
    res, _ = capacity_study
    a = res.sweep_values
    mimo = res.series("MIMO_DIGITAL")
    problems = []
    if not np.all(mimo == mimo[0]):
        problems.append("MIMO series not constant")
    for s in SIM:
        if np.any(np.diff(res.series(s)) > 0):
            problems.append(f"{s} increases somewhere")
    sl = {s: degradation_slope(a, res.series(s)) for s in SIM}
    if not (sl["SIM_7L"] > sl["SIM_4L"] > max(sl["MFSIM_2L"], sl["FILM_2L"])
            and min(sl["MFSIM_2L"], sl["FILM_2L"]) > sl["SIM_1L"]):
        problems.append("slope ordering violated")
    detail = "slopes (bps/Hz per unit alpha) " + ", ".join(f"{s} {v:.1f}" for s, v in sl.items())
    report(capsys, 7, not problems, detail + ("; " + "; ".join(problems) if problems else ""))


def test_criterion_08_crossovers(capsys, capacity_study):
    res, _ = capacity_study
    a, s7 = res.sweep_values, res.series("SIM_7L")
    checks = (("SIM_4L", 0.10, 0.25), ("MIMO_DIGITAL", 0.18, 0.34), ("SIM_1L", 0.20, 0.36))
    parts, ok = [], True
    for other, lo, hi in checks:
        x = crossing(a, s7, res.series(other))
        good = x is not None and lo <= x <= hi
        ok &= good
        parts.append(f"vs {other} at {'never' if x is None else f'{x:.3f}'} (window [{lo}, {hi}])")
    report(capsys, 8, ok, "SIM_7L crosses " + "; ".join(parts))


def test_criterion_09_ber_ordering(capsys, ber_study):
    res, _ = ber_study
    top = {s: float(res.series(s)[-1]) for s in ("SIM_1L", "SIM_4L", "SIM_7L", "MIMO_DIGITAL")}
    ok = top["SIM_7L"] < top["SIM_4L"] < top["SIM_1L"] and top["SIM_1L"] > top["MIMO_DIGITAL"]
    p = res.sweep_values[-1]
    report(capsys, 9, ok, f"BER at {p:g} dBm: " + ", ".join(f"{s} {v:.3g}" for s, v in top.items()))


def test_criterion_10_power_savings(capsys, ber_study):
    res, _ = ber_study
    schemes = ("SIM_7L", "MFSIM_2L", "FILM_2L")
    for target in (1e-5, 1e-4):
        try:
            req7 = required_power_at_ber(res.curve("SIM_7L"), target)
            break
        except UnreachableTargetError:
            continue
    else:
        report(capsys, 10, False, "SIM_7L reaches neither 1e-5 nor 1e-4 on the default grid")
    req, parts = {"SIM_7L": req7}, []
    for s in schemes[1:]:
        try:
            req[s] = required_power_at_ber(res.curve(s), target)
        except UnreachableTargetError:
            req[s] = math.inf
    ok_mf = req["MFSIM_2L"] <= req7 - 8.0
    ok_film = req["FILM_2L"] <= req7 - 4.0
    for s in schemes:
        parts.append(f"{s} {req[s]:.2f} dBm" if math.isfinite(req[s])
                     else f"{s} unreachable (floor {res.series(s).min():.3g})")
    detail = (f"required power at BER {target:g}: " + ", ".join(parts)
              + f"; MF saving {'ok' if ok_mf else 'short'}, FILM saving {'ok' if ok_film else 'short'}")
    report(capsys, 10, ok_mf and ok_film, detail)


def test_criterion_11_runtime(capsys, capacity_study, ber_study):
    total = capacity_study[1] + ber_study[1]
    report(capsys, 11, total < 1800.0,
           f"capacity study {capacity_study[1]:.0f} s + BER study {ber_study[1]:.0f} s = {total:.0f} s "
           f"on {WORKERS} worker(s) (budget 1800 s)")
