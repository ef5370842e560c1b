"""Benchmark schemes and the two seeded sweeps (capacity vs. attenuation, BER vs. power).

Work is cut into fixed tasks, one per (scheme, realization) for the
optimisation stage and one per (scheme, sweep point) for the Monte Carlo
stage.  Every task draws its randomness from a substream keyed by its grid
index, so the worker count changes wall-clock time only.
"""
from __future__ import annotations

import csv
import enum
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .architectures import (FILM, MFSIM, ArchitectureSpec, Conventional, MFSIMModel, WiredTopology)
from .config import ExperimentConfig, SCHEMES
from .metrics import BerCurve, Scenario, StopRule, ber_qpsk_pooled, capacity, dbm_to_watts
from .optimize import (OptimizerParams, build_model, fit_precoder_model, optimize_capacity_model,
                       zf_targets)
from .propagation import (LayerGeometry, derive_seed, path_loss, rayleigh_channel, steering_matrix,
                          wavelength)

# first element of every substream key, one per kind of random draw
STREAM_SIM_CHANNEL, STREAM_MIMO_CHANNEL, STREAM_OPTIMIZER, STREAM_SYMBOLS = range(4)


class SchemeId(str, enum.Enum):
    MIMO_DIGITAL = "MIMO_DIGITAL"
    SIM_1L = "SIM_1L"
    SIM_4L = "SIM_4L"
    SIM_7L = "SIM_7L"
    MFSIM_2L = "MFSIM_2L"
    FILM_2L = "FILM_2L"

    @property
    def position(self) -> int:
        return SCHEMES.index(self.value)

    @property
    def layers(self) -> int:
        return {"MIMO_DIGITAL": 0, "SIM_1L": 1, "SIM_4L": 4, "SIM_7L": 7}.get(self.value, 2)


class UnreachableTargetError(ValueError):
    pass


@dataclass
class ExperimentResult:
    sweep_name: str
    sweep_values: np.ndarray
    per_scheme_series: dict
    realizations: int
    master_seed: int
    config_digest: str
    metric: str = "value"
    symbols: dict = field(default_factory=dict)

    def __post_init__(self):
        self.sweep_values = np.asarray(self.sweep_values, dtype=float)
        for k, v in self.per_scheme_series.items():
            v = np.asarray(v, dtype=float)
            if v.shape != self.sweep_values.shape:
                raise ValueError(f"series for {k} has {v.size} points, sweep has {self.sweep_values.size}")
            self.per_scheme_series[k] = v

    def series(self, scheme) -> np.ndarray:
        return self.per_scheme_series[SchemeId(scheme)]

    def curve(self, scheme) -> BerCurve:
        s = SchemeId(scheme)
        return BerCurve(self.sweep_values, self.per_scheme_series[s], self.symbols[s], self.master_seed)


# ---------------------------------------------------------------------------
# scheme construction
# ---------------------------------------------------------------------------

def scenario_of(cfg: ExperimentConfig, tx_power_dbm: float = None, attenuation_ratio: float = None) -> Scenario:
    sc = cfg.scenario
    return Scenario(sc.carrier_hz, sc.tx_power_dbm if tx_power_dbm is None else tx_power_dbm, sc.noise_dbm,
                    sc.pathloss_exponent, sc.link_distance_m, sc.num_streams,
                    sc.attenuation_ratio if attenuation_ratio is None else attenuation_ratio)


def feed_geometry(cfg: ExperimentConfig) -> LayerGeometry:
    """Feed array in the plane ``z = 0``, half-wavelength pitch, centred on the stack axis."""
    lam = wavelength(cfg.scenario.carrier_hz)
    sh = cfg.schemes
    return LayerGeometry(sh.feed_rows, sh.feed_cols, lam / 2, (lam / 2) ** 2, 0.0)


def architecture(cfg: ExperimentConfig, scheme: SchemeId, attenuation_ratio: float = 0.0) -> ArchitectureSpec:
    """Geometry of a SIM scheme: first layer at ``feed_gap_m``, layers ``inter_layer_gap_m`` apart."""
    lam = wavelength(cfg.scenario.carrier_hz)
    sh = cfg.schemes
    z0, gap = sh.feed_gap_m, sh.inter_layer_gap_m

    def layer(l, rows=sh.layer_rows):
        return LayerGeometry.half_wavelength(rows, sh.layer_cols, lam, z0 + l * gap)

    if scheme in (SchemeId.SIM_1L, SchemeId.SIM_4L, SchemeId.SIM_7L):
        L = scheme.layers
        return ArchitectureSpec(Conventional(L, tuple(layer(l) for l in range(L)), gap), attenuation_ratio)
    if scheme is SchemeId.MFSIM_2L:
        second = layer(1)
        topo = WiredTopology.adjacent(second.size)
        return ArchitectureSpec(MFSIM(topo, (layer(0, 2 * sh.layer_rows), second)), attenuation_ratio)
    if scheme is SchemeId.FILM_2L:
        return ArchitectureSpec(FILM((layer(0), layer(1)), sh.film_bound_m), attenuation_ratio)
    raise ValueError(f"{scheme.value} has no metasurface")


def optimizer_params(cfg: ExperimentConfig) -> OptimizerParams:
    op = cfg.optimizer
    return OptimizerParams(op.step_size, op.max_iters, op.tolerance, op.restarts, cfg.seeds.master_seed)


def _aperture(spec: ArchitectureSpec) -> LayerGeometry:
    return spec.variant.geometries[-1]


def _traversals(scheme: SchemeId) -> int:
    """Metasurface traversals, each costing a power factor ``1 - alpha``."""
    return scheme.layers


def _map(fn, tasks, workers: int):
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks, chunksize=1))


def _schemes(cfg: ExperimentConfig):
    return [SchemeId(s) for s in cfg.schemes.include]


# ---------------------------------------------------------------------------
# capacity vs. attenuation
# ---------------------------------------------------------------------------

def capacity_channels(cfg: ExperimentConfig, realization: int):
    """``(H_sim, H_mimo)`` for one realization; both carry the path loss."""
    sc, sh = cfg.scenario, cfg.schemes
    lam = wavelength(sc.carrier_hz)
    pl = path_loss(sc.link_distance_m, sc.pathloss_exponent, lam)
    seed = cfg.seeds.master_seed
    n_ap = sh.layer_rows * sh.layer_cols
    H_sim = rayleigh_channel(sc.rx_antennas, n_ap, pl, derive_seed(seed, STREAM_SIM_CHANNEL, realization))
    H_mimo = rayleigh_channel(sc.rx_antennas, sh.feed_rows * sh.feed_cols, pl,
                              derive_seed(seed, STREAM_MIMO_CHANNEL, realization))
    return H_sim.matrix, H_mimo.matrix


def _capacity_task(args):
    cfg, scheme, r = args
    sc = cfg.scenario
    alphas = np.asarray(cfg.sweep.values)
    H_sim, H_mimo = capacity_channels(cfg, r)
    P, N, S = dbm_to_watts(sc.tx_power_dbm), dbm_to_watts(sc.noise_dbm), sc.num_streams
    if scheme is SchemeId.MIMO_DIGITAL:
        return np.full(alphas.size, capacity(H_mimo, P, N, S))
    lam = wavelength(sc.carrier_hz)
    model = build_model(architecture(cfg, scheme), lam, feed_geometry(cfg))
    rho = P / S / N
    power = (1 - alphas) ** _traversals(scheme)
    params = optimizer_params(cfg)
    key = (STREAM_OPTIMIZER, scheme.position, r)
    # continuation over the grid: random restarts at the first point, then
    # each point starts from the optimum of the previous one
    configs = []
    x0 = None
    for j in range(alphas.size):
        rep, _ = optimize_capacity_model(model, H_sim, rho * power[j], S, params, key, x0)
        configs.append(rep.x)
        x0 = rep.x
    E = H_sim @ model.response(np.stack(configs))
    table = np.stack([capacity(E, P * p, N, S) for p in power], axis=1)
    # every configuration is feasible at every alpha; keeping the best one found
    # anywhere on the grid makes the series non-increasing by construction
    return table.max(axis=0)


def run_capacity_vs_attenuation(cfg: ExperimentConfig, workers: int = 1) -> ExperimentResult:
    if cfg.sweep.parameter != "attenuation_ratio":
        raise ValueError("configuration does not describe an attenuation sweep")
    schemes = _schemes(cfg)
    R = cfg.sweep.realizations
    tasks = [(cfg, s, r) for s in schemes for r in range(R)]
    out = _map(_capacity_task, tasks, workers)
    series = {}
    for i, s in enumerate(schemes):
        series[s] = np.mean(np.stack(out[i * R:(i + 1) * R]), axis=0)
    return ExperimentResult("attenuation_ratio", np.asarray(cfg.sweep.values), series, R,
                            cfg.seeds.master_seed, cfg.digest(), "capacity_bps_hz")


# ---------------------------------------------------------------------------
# BER vs. transmit power
# ---------------------------------------------------------------------------

def user_channels(cfg: ExperimentConfig, geometry: LayerGeometry) -> np.ndarray:
    """Line-of-sight user rows: steering vectors of ``geometry`` scaled by the path-loss amplitude."""
    sc = cfg.scenario
    lam = wavelength(sc.carrier_hz)
    angles = [(math.radians(a), math.radians(e)) for a, e in zip(sc.user_azimuth_deg, sc.user_elevation_deg)]
    pl = path_loss(sc.link_distance_m, sc.pathloss_exponent, lam)
    return math.sqrt(pl) * steering_matrix(angles, geometry, lam)


def precoder_effective(cfg: ExperimentConfig, scheme: SchemeId, realization: int):
    """Effective users x feeds matrix after fitting the scheme to its zero-forcing target.

    Returns ``(E, residual)``; the residual is 0 for the digital baseline.
    """
    alpha = cfg.scenario.attenuation_ratio
    if scheme is SchemeId.MIMO_DIGITAL:
        A = user_channels(cfg, feed_geometry(cfg))
        return A @ zf_targets(A), 0.0
    lam = wavelength(cfg.scenario.carrier_hz)
    spec = architecture(cfg, scheme, alpha)
    model = build_model(spec, lam, feed_geometry(cfg))
    A = user_channels(cfg, _aperture(spec))
    if isinstance(model, MFSIMModel):
        # wired feeding confines each stream to its sub-area; zero-force within it
        T = zf_targets(A, model.B != 0)
    else:
        T = zf_targets(A)
    rep, _ = fit_precoder_model(model, T, optimizer_params(cfg), (STREAM_OPTIMIZER, scheme.position, realization))
    return A @ model.response(rep.x), rep.best_objective


def _fit_task(args):
    cfg, scheme, r = args
    return precoder_effective(cfg, scheme, r)


def _ber_task(args):
    cfg, scheme, j, effectives = args
    sc, sw = cfg.scenario, cfg.sweep
    stop = StopRule(sw.min_errors, sw.max_symbols, sw.batch_symbols)
    res = ber_qpsk_pooled(effectives, dbm_to_watts(sw.values[j]), dbm_to_watts(sc.noise_dbm),
                          cfg.seeds.master_seed, stop, (STREAM_SYMBOLS, scheme.position, j))
    return res.average, res.symbols * effectives[0].shape[0]


def run_ber_vs_power(cfg: ExperimentConfig, workers: int = 1) -> ExperimentResult:
    """Fit each scheme once per realization, then sweep the transmit power.

    The stopping rule is pooled over the realizations of a (scheme, power)
    point, so ``max_symbols`` bounds the work per point.
    """
    if cfg.sweep.parameter != "tx_power_dbm":
        raise ValueError("configuration does not describe a transmit-power sweep")
    schemes = _schemes(cfg)
    R = cfg.sweep.realizations
    fits = _map(_fit_task, [(cfg, s, r) for s in schemes for r in range(R)], workers)
    eff = {s: [fits[i * R + r][0] for r in range(R)] for i, s in enumerate(schemes)}
    npts = len(cfg.sweep.values)
    tasks = [(cfg, s, j, eff[s]) for s in schemes for j in range(npts)]
    out = _map(_ber_task, tasks, workers)
    series, symbols = {}, {}
    for i, s in enumerate(schemes):
        chunk = out[i * npts:(i + 1) * npts]
        series[s] = np.array([c[0] for c in chunk])
        symbols[s] = np.array([c[1] for c in chunk], dtype=np.int64)
    return ExperimentResult("tx_power_dbm", np.asarray(cfg.sweep.values), series, R,
                            cfg.seeds.master_seed, cfg.digest(), "ber", symbols)


def run_experiment(cfg: ExperimentConfig, workers: int = 1) -> ExperimentResult:
    if cfg.sweep.parameter == "attenuation_ratio":
        return run_capacity_vs_attenuation(cfg, workers)
    return run_ber_vs_power(cfg, workers)


def required_power_at_ber(curve: BerCurve, target: float) -> float:
    """Transmit power (dBm) at which ``curve`` first drops to ``target``.

    Interpolates linearly in (power, log10 BER) between the bracketing grid
    points.  A zero BER estimate is replaced by the one-error resolution of
    its point, so a silent point never pulls the crossing below what was
    actually measured.
    """
    p = curve.power_dbm_points
    b = curve.ber_values
    if not 0 < target < 1:
        raise ValueError("target BER must lie in (0, 1)")
    below = np.flatnonzero(b <= target)
    if below.size == 0:
        raise UnreachableTargetError(f"curve never reaches BER {target:g} (minimum {b.min():.3g})")
    i = int(below[0])
    if i == 0 or b[i] == target:
        return float(p[i])
    hi = b[i] if b[i] > 0 else 1.0 / (2.0 * max(int(curve.symbols_simulated[i]), 1))
    hi = min(hi, target)
    lo_b = b[i - 1]
    t = (math.log10(lo_b) - math.log10(target)) / (math.log10(lo_b) - math.log10(hi))
    return float(p[i - 1] + t * (p[i] - p[i - 1]))


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------

CSV_HEADER = ("sweep_value", "scheme", "metric", "value", "realizations", "seed")

MODEL_NOTES = {
    "power_allocation": "equal power per stream",
    "capacity": "log-det capacity of the effective channel, receiver-agnostic",
    "ber_receiver": "per-user coherent detection on the own-link gain, interference treated as noise",
    "ber_precoder": "SIM response fitted to a unit-column zero-forcing target, min_c ||G - cT||^2 / ||G||^2",
    "mfsim_feeding": "ideal wired feed: each stream drives its own rectangular sub-area",
    "mfsim_precoder": "zero-forcing restricted to each stream's sub-area",
    "film_steering": "user steering vectors evaluated at nominal atom positions",
    "film_input_coupling": "feed to first layer coupling held at nominal positions",
    "attenuation": "power factor (1 - alpha) per metasurface traversal; fibers lossless",
    "rs_model": "w = (A cos(chi)/d)(1/(2 pi d) - i/lambda) exp(i 2 pi d/lambda), cos(chi) = |dz|/d",
    "path_loss": "(lambda/4pi)^2 at 1 m, exponent law beyond",
    "optimizer": "projected gradient ascent, Armijo backtracking; FILM alternates phase and offset blocks",
    "capacity_sweep": "random restarts at the first grid point, warm start from the previous point after; "
                      "series is the best configuration found anywhere on the grid",
    "ber_averaging": "arithmetic mean over users; stopping rule pooled over realizations",
    "rng": "Philox substreams keyed by (master seed, task index)",
}


def _fmt(v) -> str:
    return repr(float(v))


def result_csv(result: ExperimentResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for j, x in enumerate(result.sweep_values):
        for s, series in result.per_scheme_series.items():
            w.writerow([_fmt(x), s.value, result.metric, _fmt(series[j]), result.realizations, result.master_seed])
    return buf.getvalue()


def result_metadata(result: ExperimentResult, cfg: ExperimentConfig, seed_override=None) -> dict:
    meta = {
        "tool": "metastack",
        "version": __version__,
        "config_digest": result.config_digest,
        "config": cfg.to_dict(),
        "seed_override": seed_override,
        "sweep_name": result.sweep_name,
        "metric": result.metric,
        "model": MODEL_NOTES,
    }
    if result.metric == "ber":
        req = {}
        for s in result.per_scheme_series:
            try:
                req[s.value] = required_power_at_ber(result.curve(s), cfg.sweep.target_ber)
            except UnreachableTargetError:
                req[s.value] = None
        meta["target_ber"] = cfg.sweep.target_ber
        meta["required_power_dbm"] = req
        meta["symbols_simulated"] = {s.value: v.tolist() for s, v in result.symbols.items()}
    return meta


def write_result(result: ExperimentResult, cfg: ExperimentConfig, out_dir, seed_override=None):
    """Write ``<sweep>.csv`` and ``<sweep>.meta.json``; returns both paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = {"attenuation_ratio": "capacity_vs_attenuation", "tx_power_dbm": "ber_vs_power"}[result.sweep_name]
    csv_path, meta_path = out / f"{stem}.csv", out / f"{stem}.meta.json"
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        fh.write(result_csv(result))
    with open(meta_path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(result_metadata(result, cfg, seed_override), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return csv_path, meta_path
