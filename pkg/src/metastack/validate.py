"""Built-in invariant suite run by ``metastack validate``.

Each check is a small, seeded, self-contained experiment that compares an
implementation against an independent oracle (finite differences, explicit
path sums, the closed-form AWGN error rate...).  Checks never raise for a
numerical mismatch; they report it.
"""
from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
from scipy.optimize import brentq

from .architectures import (ArchitectureSpec, Conventional, ConventionalModel, FILMModel,
                            MFSIMModel, Model, PhaseProfile, WiredTopology, conventional_response,
                            mfsim_response, mfsim_synthesize, phase_matrix, subarea_feed_map)
from .metrics import BerCurve, StopRule, ber_qpsk, capacity, qpsk_awgn_oracle
from .optimize import capacity_objective, default_feed, zf_targets
from .propagation import LayerGeometry, build_coupling, steering_matrix, substream, wavelength

SEED = 20240611
LAM = wavelength(28e9)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


# ---------------------------------------------------------------------------
# reusable oracles
# ---------------------------------------------------------------------------

def random_unitary(n: int, rng: np.random.Generator) -> np.ndarray:
    z = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    q, r = np.linalg.qr(z)
    return q * (np.diag(r) / np.abs(np.diag(r)))


def naive_cascade(phases, couplings, gain: float = 1.0) -> np.ndarray:
    """Explicit sum over every atom path through the stack (exponential cost)."""
    L = len(couplings)
    n_out, n_in = couplings[-1].shape[0], couplings[0].shape[1]
    sizes = [w.shape[0] for w in couplings]
    G = np.zeros((n_out, n_in), dtype=complex)
    for k in range(n_in):
        for path in itertools.product(*[range(s) for s in sizes]):
            term = np.exp(1j * phases[0][path[0]]) * couplings[0][path[0], k]
            for l in range(1, L):
                term *= couplings[l][path[l], path[l - 1]] * np.exp(1j * phases[l][path[l]])
            G[path[-1], k] += term
    return gain * G


def scaled_gradient_error(model: Model, objective: Callable, x: np.ndarray, coords, h: float = 1e-6) -> float:
    """Relative error of the analytic gradient against central differences.

    Differences are taken in the optimiser's coordinates (radians for phases,
    bound units for offsets) on the sampled ``coords``; the error is
    ``||g - g_fd|| / ||g_fd||`` over those coordinates.
    """
    scale = np.ones(model.n_params)
    for b in model.blocks:
        if b.kind == "displacement":
            scale[b.slice] = b.scale
    idx = np.zeros(1, dtype=int)
    G, cache = model.forward(x[None])
    _, Gbar = objective(G, idx)
    g = model.pullback(cache, Gbar)[0] * scale
    coords = np.asarray(coords)
    steps = np.zeros((2 * coords.size, model.n_params))
    rows = np.arange(coords.size)
    steps[2 * rows, coords] = h * scale[coords]
    steps[2 * rows + 1, coords] = -h * scale[coords]
    Gs = model.response(x[None] + steps)
    f, _ = objective(Gs, np.zeros(len(steps), dtype=int))
    fd = (f[0::2] - f[1::2]) / (2 * h)
    return float(np.linalg.norm(g[coords] - fd) / max(np.linalg.norm(fd), 1e-300))


def gradient_instance(kind: str, rng: np.random.Generator, rows: int = 4, cols: int = 4,
                      alpha: float = 0.1):
    """A small model, a Rayleigh channel and an interior random point for gradient checks.

    ``kind`` is ``SIM_<L>L``, ``MFSIM`` or ``FILM``.  Offsets are drawn
    strictly inside the bound so that central differences do not touch the
    projection.
    """
    feed = default_feed(LAM)
    gap = 5e-3
    if kind.startswith("SIM_"):
        L = int(kind[4:-1])
        geos = [LayerGeometry.half_wavelength(rows, cols, LAM, 40e-3 + gap * l) for l in range(L)]
        model = ConventionalModel.from_spec(ArchitectureSpec(Conventional(L, geos, gap), alpha),
                                            build_coupling(feed, geos[0], LAM), LAM)
    elif kind == "MFSIM":
        g2 = LayerGeometry.half_wavelength(rows, cols, LAM)
        model = MFSIMModel(WiredTopology.adjacent(g2.size), subarea_feed_map(g2, feed.size), alpha)
    elif kind == "FILM":
        g1 = LayerGeometry.half_wavelength(rows, cols, LAM, 40e-3)
        model = FILMModel(build_coupling(feed, g1, LAM), g1, g1.at(40e-3 + gap), LAM, 2.4e-3, alpha)
    else:
        raise ValueError(f"unknown architecture kind {kind!r}")
    x = model.initial(rng)
    for b in model.blocks:
        if b.kind == "displacement":
            x[b.slice] = rng.uniform(-0.9 * b.scale, 0.9 * b.scale, b.stop - b.start)
    H = (rng.standard_normal((4, model.n_out)) + 1j * rng.standard_normal((4, model.n_out))) / math.sqrt(2)
    E = H @ model.response(x)
    rho = 10.0 / np.mean(np.abs(E) ** 2)
    return model, H, rho, x


# ---------------------------------------------------------------------------
# checks
# ---------------------------------------------------------------------------

def check_phase_unitarity(n_profiles: int = 200):
    rng = substream(SEED, 1)
    worst = 0.0
    for _ in range(n_profiles):
        P = phase_matrix(PhaseProfile(rng.uniform(-10, 10, 100)))
        worst = max(worst, np.abs(P @ np.conj(P.T) - np.eye(100)).max())
    return worst < 1e-12, f"max |Phi Phi^H - I| = {worst:.2e} over {n_profiles} profiles"


def check_mfsim_round_trip(n_targets: int = 200):
    rng = substream(SEED, 2)
    worst = 0.0
    for _ in range(n_targets):
        t = np.sqrt(rng.uniform(0, 1, 100)) * np.exp(1j * rng.uniform(-np.pi, np.pi, 100))
        t[:4] = [0, 1, -1j, np.exp(2j)]
        th, ph = mfsim_synthesize(t)
        worst = max(worst, np.abs(mfsim_response(th, ph, WiredTopology.adjacent(100), 0.0) - t).max())
    return worst < 1e-12, f"max |response - target| = {worst:.2e} over {n_targets} targets"


def check_gradient(kind: str, points: int = 5):
    rng = substream(SEED, 3, sum(map(ord, kind)))
    worst = 0.0
    for _ in range(points):
        model, H, rho, x = gradient_instance(kind, rng)
        obj = capacity_objective(H[None], rho, 4)
        coords = rng.choice(model.n_params, size=min(12, model.n_params), replace=False)
        worst = max(worst, scaled_gradient_error(model, obj, x, coords))
    return worst < 1e-5, f"max relative error vs central differences = {worst:.2e} ({points} points)"


def check_brute_force_cascade():
    rng = substream(SEED, 4)
    worst = 0.0
    for L in (1, 2, 3):
        for n in (1, 2, 3):
            geos = [LayerGeometry(1, n, LAM / 2, (LAM / 2) ** 2, 40e-3 + 5e-3 * l) for l in range(L)]
            feed = LayerGeometry(1, 2, LAM / 2, (LAM / 2) ** 2, 0.0)
            W1 = build_coupling(feed, geos[0], LAM).matrix
            walls = [W1] + [build_coupling(a, b, LAM).matrix for a, b in zip(geos, geos[1:])]
            phases = [rng.uniform(0, 2 * np.pi, n) for _ in range(L)]
            G = conventional_response(ArchitectureSpec(Conventional(L, geos, 5e-3), 0.2),
                                      [PhaseProfile(p) for p in phases], W1, LAM)
            ref = naive_cascade(phases, walls, math.sqrt(0.8) ** L)
            worst = max(worst, np.abs(G - ref).max() / np.abs(ref).max())
    return worst < 1e-12, f"max relative deviation from path summation = {worst:.2e}"


def check_awgn_oracle(points_db=(2.0, 4.0, 6.0, 8.0, 9.6)):
    worst = 0.0
    for i, gdb in enumerate(points_db):
        gamma_b = 10 ** (gdb / 10)
        # per-user symbol SNR 2 gamma_b with unit noise and 4 users sharing the power
        E = np.eye(4, dtype=complex)
        res = ber_qpsk(E, 4 * 2 * gamma_b, 1.0, SEED + i, StopRule(200, 10_000_000, 100_000))
        p = qpsk_awgn_oracle(gamma_b)
        se = math.sqrt(p * (1 - p) / (2 * res.symbols * 4))
        worst = max(worst, abs(res.average - p) / se)
    return worst < 3, f"max deviation = {worst:.2f} standard errors at {list(points_db)} dB"


def check_capacity_unitary_invariance():
    rng = substream(SEED, 5)
    worst = 0.0
    for _ in range(50):
        E = rng.standard_normal((4, 6)) + 1j * rng.standard_normal((4, 6))
        U, V = random_unitary(4, rng), random_unitary(6, rng)
        c0 = capacity(E, 1.0, 0.1, 4)
        worst = max(worst, abs(capacity(U @ E @ V, 1.0, 0.1, 4) - c0) / c0)
    return worst < 1e-12, f"max relative change under unitary rotations = {worst:.2e}"


def check_zf_interference():
    geo = LayerGeometry.half_wavelength(10, 10, LAM)
    angles = [(math.radians(a), 0.0) for a in (-40, -15, 15, 40)]
    A = steering_matrix(angles, geo, LAM)
    E = A @ zf_targets(A)
    d = np.abs(np.diag(E))
    leak = np.abs(E - np.diag(np.diag(E))).max() / d.min()
    return leak < 1e-10, f"max off-diagonal / diagonal = {leak:.2e}"


def check_required_power_oracle():
    from .experiments import required_power_at_ber
    p = np.arange(0.0, 16.0, 2.0)
    ber = qpsk_awgn_oracle(10 ** (p / 10))
    exact = brentq(lambda q: math.log10(qpsk_awgn_oracle(10 ** (q / 10))) + 5, 0, 14)
    est = required_power_at_ber(BerCurve(p, ber, np.full(p.size, 10 ** 7), 0), 1e-5)
    return abs(est - exact) < 0.1, f"interpolated {est:.3f} dB vs analytic {exact:.3f} dB"


def check_worker_determinism():
    from .config import default_config
    from .experiments import result_csv, run_capacity_vs_attenuation
    cfg = default_config("attenuation_ratio")
    cfg = replace(cfg, schemes=replace(cfg.schemes, include=("MIMO_DIGITAL", "SIM_1L", "MFSIM_2L"),
                                       layer_rows=4, layer_cols=4),
                  sweep=replace(cfg.sweep, values=(0.0, 0.2), realizations=2),
                  optimizer=replace(cfg.optimizer, max_iters=20, restarts=2))
    a = result_csv(run_capacity_vs_attenuation(cfg, workers=1))
    b = result_csv(run_capacity_vs_attenuation(cfg, workers=2))
    return a == b, "CSV identical for 1 and 2 workers" if a == b else "CSV differs between worker counts"


CHECKS: dict[str, Callable] = {
    "phase_unitarity": check_phase_unitarity,
    "mfsim_round_trip": check_mfsim_round_trip,
    "gradient_sim_1l": lambda: check_gradient("SIM_1L"),
    "gradient_sim_4l": lambda: check_gradient("SIM_4L"),
    "gradient_sim_7l": lambda: check_gradient("SIM_7L"),
    "gradient_mfsim": lambda: check_gradient("MFSIM"),
    "gradient_film": lambda: check_gradient("FILM"),
    "cascade_brute_force": check_brute_force_cascade,
    "awgn_oracle": check_awgn_oracle,
    "capacity_unitary_invariance": check_capacity_unitary_invariance,
    "zf_interference": check_zf_interference,
    "required_power_oracle": check_required_power_oracle,
    "worker_determinism": check_worker_determinism,
}


def run_checks(names=None) -> list[CheckResult]:
    """Run the named checks (all by default); exceptions count as failures."""
    out = []
    for name in names or CHECKS:
        t = time.perf_counter()
        try:
            ok, detail = CHECKS[name]()
        except Exception as exc:  # a crashing check is a failed check, reported by name
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        out.append(CheckResult(name, bool(ok), detail, time.perf_counter() - t))
    return out
