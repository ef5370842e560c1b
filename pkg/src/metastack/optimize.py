"""Configuration solvers for the SIM forward models.

All solvers share one batched projected-gradient engine with Armijo
backtracking.  Every element of a batch (a restart, a channel realization,
an attenuation ratio...) carries its own step size and convergence flag, so
the per-element trajectory does not depend on what else is in the batch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .architectures import (FILM, MFSIM, ArchitectureSpec, Conventional, ConventionalModel,
                            DisplacementProfile, FILMModel, MFSIMModel, Model, PhaseProfile, ShapeError,
                            mfsim_synthesize, subarea_feed_map)
from .metrics import NumericalError, capacity_and_grad
from .propagation import LayerGeometry, build_coupling, substream

ARMIJO_C = 1e-4
MAX_BACKTRACKS = 40
MAX_STEP = math.pi


class SingularChannelError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class OptimizerParams:
    step_size: float = 0.1
    max_iters: int = 500
    tolerance: float = 1e-6
    restarts: int = 4
    seed: int = 0

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if not self.tolerance >= 0:
            raise ValueError("tolerance must be non-negative")
        if self.restarts < 1:
            raise ValueError("restarts must be at least 1")


@dataclass
class OptimizationReport:
    """Outcome of one solver call.

    ``best_objective`` is the capacity (bits/s/Hz) for capacity problems and
    the normalised fitting residual for precoder fits; ``objective_trace``
    belongs to the winning restart.
    """

    best_objective: float
    objective_trace: np.ndarray
    final_config: dict
    converged: bool
    restart_objectives: np.ndarray = field(default_factory=lambda: np.zeros(0))
    x: Optional[np.ndarray] = None


# ---------------------------------------------------------------------------
# engine
# ---------------------------------------------------------------------------

def _group_masks(model: Model, alternate: bool):
    """Boolean parameter masks updated together; FILM alternates phases and offsets."""
    if not alternate:
        return [np.ones(model.n_params, dtype=bool)]
    masks = []
    for kind in ("phase", "displacement"):
        m = np.zeros(model.n_params, dtype=bool)
        for b in model.blocks:
            if b.kind == kind:
                m[b.slice] = True
        if m.any():
            masks.append(m)
    return masks


def _scales(model: Model) -> np.ndarray:
    s = np.ones(model.n_params)
    for b in model.blocks:
        if b.kind == "displacement":
            s[b.slice] = b.scale
    return s


def _bounds(model: Model):
    lo = np.full(model.n_params, -np.inf)
    hi = np.full(model.n_params, np.inf)
    for b in model.blocks:
        if b.kind == "displacement":
            lo[b.slice], hi[b.slice] = -b.scale, b.scale
    return lo, hi


def projected_ascent(model: Model, objective: Callable, x0: np.ndarray, params: OptimizerParams,
                     alternate: bool = False):
    """Maximise ``objective`` over a batch of starting points.

    ``objective(G, idx)`` returns ``(f, Gbar)`` for the batch elements ``idx``
    with ``Gbar = df/dconj(G)``.  Parameters are rescaled so that phases are
    in radians and offsets in units of their bound.  Each iteration moves
    along the projected gradient with a Barzilai-Borwein trial step (the
    first step moves the largest component by ``step_size``) and halves it
    until the Armijo condition holds, so the objective never decreases.

    Returns ``(x, f, trace, converged)`` with ``trace`` of shape
    ``(iterations + 1, batch)``.
    """
    x = model.project(np.atleast_2d(x0))
    B = x.shape[0]
    scale = _scales(model)
    lo, hi = _bounds(model)
    groups = _group_masks(model, alternate)
    idx_all = np.arange(B)

    def evaluate(xs, idx):
        G, cache = model.forward(xs)
        f, Gbar = objective(G, idx)
        if not np.all(np.isfinite(f)):
            raise NumericalError("objective is not finite")
        return f, (cache, Gbar)

    def gradient(state, keep=None):
        cache, Gbar = state if keep is None or keep.all() else _take(state, keep)
        return model.pullback(cache, Gbar)

    f, state = evaluate(x, idx_all)
    g = gradient(state)
    nG = len(groups)
    t = np.full((nG, B), np.nan)
    last_s = np.zeros((nG, B, model.n_params))
    last_y = np.zeros((nG, B, model.n_params))
    stalled = np.zeros((nG, B), dtype=bool)
    active = np.ones(B, dtype=bool)
    trace = [f.copy()]
    for it in range(params.max_iters):
        if not active.any():
            break
        gi = it % nG
        mask = groups[gi]
        ids = np.flatnonzero(active)
        xa, fa, ga = x[ids], f[ids], g[ids]
        gu = np.where(mask, scale * ga, 0.0)
        peak = np.max(np.abs(gu), axis=-1)
        flat = peak == 0
        # Barzilai-Borwein step from the previous move of this block group
        s_, y_ = last_s[gi, ids], last_y[gi, ids]
        sy = -np.sum(s_ * y_, axis=-1)
        ss = np.sum(s_ * s_, axis=-1)
        ta = np.where((sy > 0) & np.isfinite(t[gi, ids]), ss / np.where(sy > 0, sy, 1), np.nan)
        fresh = ~np.isfinite(ta)
        ta[fresh] = params.step_size / np.where(flat[fresh], 1, peak[fresh])
        ta = np.minimum(ta, MAX_STEP / np.where(flat, 1, peak))
        accepted = np.zeros(ids.size, dtype=bool)
        new_x, new_f, new_g = xa.copy(), fa.copy(), ga.copy()
        pending = np.flatnonzero(~flat)
        for _ in range(MAX_BACKTRACKS):
            if pending.size == 0:
                break
            d = scale * (ta[pending, None] * gu[pending])
            d = np.clip(xa[pending] + d, lo, hi) - xa[pending]
            trial = model.project(xa[pending] + d)
            ft, state = evaluate(trial, ids[pending])
            gain = np.sum(ga[pending] * d, axis=-1)
            ok = ft >= fa[pending] + ARMIJO_C * gain
            take = pending[ok]
            # gradients only for accepted trials
            gt = gradient(state, ok) if ok.any() else np.zeros((0, model.n_params))
            new_x[take], new_f[take], new_g[take] = trial[ok], ft[ok], gt
            accepted[take] = True
            sel = ids[take]
            last_s[gi, sel] = np.where(mask, d[ok] / scale, 0.0)
            last_y[gi, sel] = np.where(mask, scale * (gt - ga[take]), 0.0)
            ta[pending[~ok]] *= 0.5
            pending = pending[~ok]
        rel = np.abs(new_f - fa) / np.maximum(np.abs(fa), 1e-300)
        stall = (~accepted) | (rel < params.tolerance)
        t[gi, ids] = np.where(accepted, ta, np.nan)
        x[ids], f[ids], g[ids] = new_x, new_f, new_g
        stalled[gi, ids] = stall
        done = np.all(stalled[:, ids], axis=0)
        if it + 1 < nG:
            done[:] = False
        active[ids[done]] = False
        trace.append(f.copy())
    return x, f, np.array(trace), ~active


def _take(tree, keep):
    """Index every array in a nested tuple/list by the boolean batch mask ``keep``."""
    if isinstance(tree, (tuple, list)):
        return type(tree)(_take(t, keep) for t in tree)
    return tree[keep]


def _best(fs: np.ndarray) -> int:
    # argmax returns the first maximiser, which gives the lowest-restart tie-break
    return int(np.argmax(fs))


def initial_points(model: Model, params: OptimizerParams, key: tuple = ()) -> np.ndarray:
    return np.stack([model.initial(substream(params.seed, *key, r)) for r in range(params.restarts)])


# ---------------------------------------------------------------------------
# model construction
# ---------------------------------------------------------------------------

def default_feed(lam: float, n_feeds: int = 4) -> LayerGeometry:
    """Uniform linear feed array with half-wavelength spacing at ``z = 0``."""
    return LayerGeometry(1, n_feeds, lam / 2, (lam / 2) ** 2, 0.0)


def build_model(spec: ArchitectureSpec, lam: float, feed: LayerGeometry) -> Model:
    v = spec.variant
    if isinstance(v, Conventional):
        return ConventionalModel.from_spec(spec, build_coupling(feed, v.geometries[0], lam), lam)
    if isinstance(v, MFSIM):
        return MFSIMModel(v.topology, subarea_feed_map(v.geometries[1], feed.size), spec.attenuation_ratio)
    if isinstance(v, FILM):
        return FILMModel.from_spec(spec, build_coupling(feed, v.geometries[0], lam), lam)
    raise TypeError(f"unknown architecture variant {type(v).__name__}")


def unpack(model: Model, x: np.ndarray) -> dict:
    """Split a flat parameter vector into named phase/displacement profiles."""
    out = {}
    for b in model.blocks:
        v = np.asarray(x[b.slice])
        if b.kind == "phase":
            out[b.name] = PhaseProfile(v)
        else:
            out[b.name] = DisplacementProfile(np.clip(v, -b.scale, b.scale).reshape(-1, 3), b.scale)
    return out


def pack(model: Model, config: dict) -> np.ndarray:
    x = np.zeros(model.n_params)
    for b in model.blocks:
        item = config[b.name]
        x[b.slice] = item.phases if b.kind == "phase" else item.offsets.ravel()
    return x


# ---------------------------------------------------------------------------
# capacity
# ---------------------------------------------------------------------------

def capacity_objective(channels: np.ndarray, snr_per_stream: float, streams: int):
    """Objective closure for a stack of channels ``(B, rx, aperture)``.

    ``channels[i]`` goes with batch element ``i``.
    """
    H = np.asarray(channels)
    Hh = np.conj(np.swapaxes(H, -1, -2))

    def objective(G, idx):
        E = H[idx] @ G
        C, Ebar = capacity_and_grad(E, snr_per_stream, streams)
        return C, Hh[idx] @ Ebar
    return objective


def _check_capacity_dims(model: Model, H: np.ndarray, streams: int):
    if H.shape[-1] != model.n_out:
        raise ShapeError(f"channel has {H.shape[-1]} columns, SIM aperture has {model.n_out} atoms")
    if streams > min(H.shape[-2], model.n_feeds):
        raise ValueError(f"{streams} streams exceed the effective channel dimensions")


def optimize_capacity_model(model: Model, channel: np.ndarray, snr_per_stream: float, streams: int,
                            params: OptimizerParams, key: tuple = (), x0: np.ndarray = None):
    """Best-of-restarts capacity ascent for one channel; returns ``(report, all_x)``."""
    H = np.asarray(channel)
    _check_capacity_dims(model, H, streams)
    starts = initial_points(model, params, key) if x0 is None else np.atleast_2d(x0)
    obj = capacity_objective(np.broadcast_to(H, (starts.shape[0],) + H.shape), snr_per_stream, streams)
    x, f, trace, conv = projected_ascent(model, obj, starts, params, alternate=isinstance(model, FILMModel))
    k = _best(f)
    report = OptimizationReport(float(f[k]), trace[:, k], unpack(model, x[k]), bool(conv[k]), f.copy(), x[k])
    return report, x


def optimize_capacity(spec: ArchitectureSpec, channel, scenario, params: OptimizerParams = OptimizerParams(),
                      feed: LayerGeometry = None, key: tuple = ()) -> OptimizationReport:
    """Maximise equal-power capacity of ``channel @ G(config)`` over the SIM configuration.

    ``channel`` maps aperture atoms to receive antennas and already carries
    the path loss.  The feed defaults to a 4-element half-wavelength ULA.
    """
    from .propagation import wavelength
    lam = wavelength(scenario.carrier_hz)
    feed = feed or default_feed(lam, scenario.num_streams_or_users)
    model = build_model(spec, lam, feed)
    H = channel.matrix if hasattr(channel, "matrix") else np.asarray(channel)
    S = scenario.num_streams_or_users
    rho = scenario.tx_power_w / S / scenario.noise_w
    return optimize_capacity_model(model, H, rho, S, params, key)[0]


def gradient_capacity_phases(spec: ArchitectureSpec, profiles: dict, channel, scenario,
                             feed: LayerGeometry = None) -> np.ndarray:
    """Analytic capacity gradient w.r.t. every phase (and offset, for FILM) in ``profiles``.

    ``profiles`` maps block names (``layer1``, ``theta_first``, ``theta1``...)
    to profiles; the result follows the flat parameter order of the model.
    """
    from .propagation import wavelength
    lam = wavelength(scenario.carrier_hz)
    feed = feed or default_feed(lam, scenario.num_streams_or_users)
    model = build_model(spec, lam, feed)
    x = pack(model, profiles)
    H = channel.matrix if hasattr(channel, "matrix") else np.asarray(channel)
    S = scenario.num_streams_or_users
    _check_capacity_dims(model, H, S)
    G, cache = model.forward(x)
    _, Ebar = capacity_and_grad(H @ G, scenario.tx_power_w / S / scenario.noise_w, S)
    return model.pullback(cache, np.conj(H.T) @ Ebar)


# ---------------------------------------------------------------------------
# multi-user precoding
# ---------------------------------------------------------------------------

def zf_targets(user_channels, support: np.ndarray = None) -> np.ndarray:
    """Zero-forcing precoder ``H^H (H H^H)^-1`` with unit-norm columns.

    With a boolean ``support`` mask (feeds x users) column k may only use the
    rows where ``support[:, k]`` is set; it is then the projection of user k's
    restricted channel onto the null space of the other users' restricted
    channels.
    """
    H = np.asarray(user_channels, dtype=complex)
    K, N = H.shape
    if K > N:
        raise SingularChannelError(f"{K} users cannot be separated by {N} feeds")
    if support is None:
        gram = H @ np.conj(H.T)
        if np.linalg.cond(gram) > 1e12:
            raise SingularChannelError("user channels are (nearly) linearly dependent")
        P = np.conj(H.T) @ np.linalg.inv(gram)
        return P / np.linalg.norm(P, axis=0)
    support = np.asarray(support, dtype=bool)
    if support.shape != (N, K):
        raise ShapeError("support mask must have shape (feeds, users)")
    P = np.zeros((N, K), dtype=complex)
    for k in range(K):
        rows = np.flatnonzero(support[:, k])
        Hs = H[:, rows]
        others = np.delete(Hs, k, axis=0)
        h = np.conj(Hs[k])
        if others.size:
            Q, R = np.linalg.qr(np.conj(others.T))
            if np.min(np.abs(np.diag(R))) < 1e-12 * max(np.abs(R).max(), 1e-300):
                raise SingularChannelError(f"interferers of user {k} are dependent on its support")
            h = h - Q @ (np.conj(Q.T) @ h)
        n = np.linalg.norm(h)
        if n < 1e-12 * np.linalg.norm(Hs[k]):
            raise SingularChannelError(f"user {k} cannot be separated on its support")
        P[rows, k] = h / n
    return P


def fit_residual(G, T):
    """``min_c ||G - cT||^2 / ||G||^2`` (zero for an all-zero response is undefined: returns 1)."""
    G, T = np.asarray(G), np.asarray(T)
    a = np.sum(np.conj(T) * G, axis=(-2, -1))
    p = np.sum(np.abs(G) ** 2, axis=(-2, -1))
    q = np.sum(np.abs(T) ** 2)
    with np.errstate(invalid="ignore", divide="ignore"):
        r = 1 - np.abs(a) ** 2 / (q * p)
    return np.where(p > 0, np.maximum(r, 0.0), 1.0)


def fit_objective(T: np.ndarray):
    """Negated normalised residual and its Wirtinger gradient, for ascent."""
    T = np.asarray(T)
    q = np.sum(np.abs(T) ** 2)

    def objective(G, idx):
        a = np.sum(np.conj(T) * G, axis=(-2, -1))
        p = np.sum(np.abs(G) ** 2, axis=(-2, -1))
        f = np.abs(a) ** 2 / (q * p) - 1
        Gbar = (a[..., None, None] * p[..., None, None] * T
                - (np.abs(a) ** 2)[..., None, None] * G) / (q * p * p)[..., None, None]
        return f, Gbar
    return objective


def _mfsim_closed_form(model: MFSIMModel, T: np.ndarray):
    """Per-atom least-squares gains, scaled to the amplitude limit; exact optimum of the fit."""
    B = model.B
    num = np.sum(np.conj(B) * T, axis=-1)
    den = np.sum(np.abs(B) ** 2, axis=-1)
    g = np.where(den > 0, num / np.where(den > 0, den, 1), 0)
    peak = np.abs(g).max()
    t = g / peak if peak > 0 else g
    theta, phi = mfsim_synthesize(t, 0.0, model.topology)
    return np.concatenate([theta.phases, phi.phases])


def fit_precoder_model(model: Model, target: np.ndarray, params: OptimizerParams, key: tuple = ()):
    """Best-of-restarts fit of ``G(config)`` to ``c * target``; returns ``(report, all_x)``."""
    T = np.asarray(target, dtype=complex)
    if T.shape != (model.n_out, model.n_feeds):
        raise ShapeError(f"target must be {model.n_out}x{model.n_feeds}, got {T.shape}")
    if isinstance(model, MFSIMModel):
        x = _mfsim_closed_form(model, T)
        r = float(fit_residual(model.response(x), T))
        if r < 1e-12:
            rep = OptimizationReport(r, np.array([r]), unpack(model, x), True, np.array([r]), x)
            return rep, x[None]
        starts = np.stack([x] + [model.initial(substream(params.seed, *key, k))
                                 for k in range(1, params.restarts)])
    else:
        starts = initial_points(model, params, key)
    x, f, trace, conv = projected_ascent(model, fit_objective(T), starts, params,
                                         alternate=isinstance(model, FILMModel))
    k = _best(f)
    report = OptimizationReport(float(-f[k]), -trace[:, k], unpack(model, x[k]), bool(conv[k]), -f, x[k])
    return report, x


def fit_precoder(spec: ArchitectureSpec, target, params: OptimizerParams = OptimizerParams(),
                 lam: float = None, feed: LayerGeometry = None, key: tuple = ()) -> OptimizationReport:
    """Fit the SIM response to a scaled precoder target (aperture x feeds).

    The objective is ``min_c ||G - cT||^2 / ||G||^2``; the normalisation keeps
    the trivial ``G = 0, c = 0`` solution out.  For the MF-SIM the exact
    optimum comes from per-atom least squares plus closed-form synthesis.
    """
    from .propagation import wavelength
    lam = lam or wavelength(28e9)
    T = np.asarray(target)
    feed = feed or default_feed(lam, T.shape[1])
    return fit_precoder_model(build_model(spec, lam, feed), T, params, key)[0]
