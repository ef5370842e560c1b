"""Forward models for conventional SIM stacks, the meta-fiber 2-layer SIM and the FILM.

Each architecture maps its configuration to a complex response matrix ``G``
(aperture atoms x feed antennas).  The public functions follow the physical
description directly; the ``*Model`` classes evaluate the same maps on a flat
parameter vector with arbitrary leading batch dimensions and provide the
reverse-mode pullback used by the optimizers.

Pullback convention: for a real objective ``f(G)`` the caller passes
``Gbar = df/dconj(G)`` so that ``df = 2 Re sum(conj(Gbar) * dG)``.
"""
from __future__ import annotations

from collections import OrderedDict
import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .propagation import (ComplexCoupling, LayerGeometry, PropagationError, build_coupling,
                          coupling_from_positions)

TWO_PI = 2 * np.pi
MAX_LAYERS = 16


class ShapeError(ValueError):
    pass


class InfeasibleAmplitudeError(ValueError):
    """Target gains outside the unit disk; ``indices`` lists the offenders."""

    def __init__(self, indices):
        self.indices = [int(i) for i in indices]
        super().__init__(f"target amplitude exceeds 1 at indices {self.indices}")


class DisplacementBoundError(ValueError):
    pass


def wrap_phase(p):
    """Map phases into [0, 2pi); tiny negatives would otherwise round up to 2pi."""
    w = np.mod(p, TWO_PI)
    return np.where(w >= TWO_PI, 0.0, w)


# ---------------------------------------------------------------------------
# configuration types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PhaseProfile:
    """Per-atom phase shifts of one layer, stored wrapped to [0, 2pi)."""

    phases: np.ndarray

    def __post_init__(self):
        p = wrap_phase(np.asarray(self.phases, dtype=float).ravel())
        if not np.all(np.isfinite(p)):
            raise ValueError("phases must be finite")
        p.setflags(write=False)
        object.__setattr__(self, "phases", p)

    def __len__(self):
        return self.phases.size

    @classmethod
    def zeros(cls, n: int) -> "PhaseProfile":
        return cls(np.zeros(n))


@dataclass(frozen=True)
class WiredTopology:
    """2-to-1 meta-fiber wiring: second-layer atom n combines first-layer atoms ``pairs[n]``."""

    pairs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.pairs, dtype=int)
        if p.ndim != 2 or p.shape[1] != 2 or p.shape[0] < 1:
            raise ShapeError("pairs must have shape (N, 2)")
        n = p.shape[0]
        if np.any(p[:, 0] == p[:, 1]):
            raise ValueError("each pair must reference two distinct first-layer atoms")
        if not np.array_equal(np.sort(p.ravel()), np.arange(2 * n)):
            raise ValueError("pairs must be a perfect matching of the 2N first-layer atoms")
        p.setflags(write=False)
        object.__setattr__(self, "pairs", p)

    @property
    def n_second(self) -> int:
        return self.pairs.shape[0]

    @property
    def n_first(self) -> int:
        return 2 * self.pairs.shape[0]

    @classmethod
    def adjacent(cls, n_second: int) -> "WiredTopology":
        """Pairs first-layer atoms (2n, 2n+1) onto second-layer atom n."""
        idx = np.arange(n_second)
        return cls(np.column_stack([2 * idx, 2 * idx + 1]))


@dataclass(frozen=True)
class DisplacementProfile:
    offsets: np.ndarray
    bound: float

    def __post_init__(self):
        o = np.asarray(self.offsets, dtype=float)
        if o.ndim != 2 or o.shape[1] != 3:
            raise ShapeError("offsets must have shape (N, 3)")
        if not self.bound >= 0:
            raise ValueError("bound must be non-negative")
        if np.any(np.abs(o) > self.bound):
            raise DisplacementBoundError(
                f"offset component {np.abs(o).max():.4g} m exceeds bound {self.bound:.4g} m")
        o.setflags(write=False)
        object.__setattr__(self, "offsets", o)

    @classmethod
    def zeros(cls, n: int, bound: float) -> "DisplacementProfile":
        return cls(np.zeros((n, 3)), bound)


@dataclass(frozen=True)
class Conventional:
    num_layers: int
    geometries: tuple
    inter_layer_gap: float

    def __post_init__(self):
        geos = tuple(self.geometries)
        object.__setattr__(self, "geometries", geos)
        if not 1 <= self.num_layers <= MAX_LAYERS:
            raise ValueError(f"num_layers must be in 1..{MAX_LAYERS}")
        if len(geos) != self.num_layers:
            raise ShapeError("one geometry per layer required")
        z = [g.z_offset for g in geos]
        if any(b <= a for a, b in zip(z, z[1:])):
            raise ValueError("layers must be ordered by increasing z_offset")


@dataclass(frozen=True)
class MFSIM:
    """Meta-fiber 2-layer SIM; ``geometries = (first, second)``."""

    topology: WiredTopology
    geometries: tuple

    def __post_init__(self):
        geos = tuple(self.geometries)
        object.__setattr__(self, "geometries", geos)
        if len(geos) != 2:
            raise ShapeError("MF-SIM has exactly two layers")
        if geos[0].size != self.topology.n_first or geos[1].size != self.topology.n_second:
            raise ShapeError("layer sizes do not match the wiring topology")


@dataclass(frozen=True)
class FILM:
    geometries: tuple
    bound: float

    def __post_init__(self):
        geos = tuple(self.geometries)
        object.__setattr__(self, "geometries", geos)
        if len(geos) != 2:
            raise ShapeError("FILM has exactly two layers")
        if not geos[1].z_offset > geos[0].z_offset:
            raise ValueError("second FILM layer must lie beyond the first")
        if not self.bound >= 0:
            raise ValueError("bound must be non-negative")


Variant = Union[Conventional, MFSIM, FILM]


@dataclass(frozen=True)
class ArchitectureSpec:
    variant: Variant
    attenuation_ratio: float = 0.0

    def __post_init__(self):
        if not 0 <= self.attenuation_ratio < 1:
            raise ValueError("attenuation_ratio must lie in [0, 1)")

    @property
    def num_layers(self) -> int:
        v = self.variant
        return v.num_layers if isinstance(v, Conventional) else 2


# ---------------------------------------------------------------------------
# closed-form forward models
# ---------------------------------------------------------------------------

def phase_matrix(profile: PhaseProfile) -> np.ndarray:
    return np.diag(np.exp(1j * profile.phases))


def _as_matrix(c) -> np.ndarray:
    return c.matrix if isinstance(c, ComplexCoupling) else np.asarray(c, dtype=complex)


def inter_layer_couplings(geometries: Sequence[LayerGeometry], lam: float) -> list[np.ndarray]:
    return [build_coupling(a, b, lam).matrix for a, b in zip(geometries, geometries[1:])]


def conventional_response(spec: Union[ArchitectureSpec, Conventional], profiles: Sequence[PhaseProfile],
                          input_coupling, lam: float, attenuation_ratio: float = None) -> np.ndarray:
    """``G = sqrt(1-a)^L  Phi_L W_L ... Phi_1 W_1`` with ``W_1 = input_coupling``."""
    if isinstance(spec, ArchitectureSpec):
        variant, alpha = spec.variant, spec.attenuation_ratio
    else:
        variant, alpha = spec, 0.0
    if attenuation_ratio is not None:
        alpha = attenuation_ratio
    if len(profiles) != variant.num_layers:
        raise ShapeError(f"expected {variant.num_layers} phase profiles, got {len(profiles)}")
    W1 = _as_matrix(input_coupling)
    walls = [W1] + inter_layer_couplings(variant.geometries, lam)
    G = None
    for geo, prof, W in zip(variant.geometries, profiles, walls):
        if len(prof) != geo.size or W.shape[0] != geo.size:
            raise ShapeError("phase profile / coupling size does not match the layer")
        G = W if G is None else W @ G
        G = np.exp(1j * prof.phases)[:, None] * G
    return math.sqrt(1 - alpha) ** variant.num_layers * G


def mfsim_response(theta_first: PhaseProfile, phi_second: PhaseProfile, topology: WiredTopology,
                   alpha: float) -> np.ndarray:
    """Per-atom gain of the wired 2-layer stack under unit, in-phase illumination.

    Each fiber pair sums two phasors with a 1/2 combiner; both metasurface
    traversals contribute sqrt(1 - alpha) and the fibers are lossless.
    """
    if len(theta_first) != topology.n_first or len(phi_second) != topology.n_second:
        raise ShapeError("profile lengths must be 2N (first layer) and N (second layer)")
    th = theta_first.phases[topology.pairs]
    pair_sum = 0.5 * (np.exp(1j * th[:, 0]) + np.exp(1j * th[:, 1]))
    return (1 - alpha) * np.exp(1j * phi_second.phases) * pair_sum


def mfsim_synthesize(targets, alpha: float = 0.0, topology: WiredTopology = None):
    """Closed-form phases realising ``targets`` (pre-attenuation gains, ``|t| <= 1``).

    Returns ``(theta_first, phi_second)`` such that
    ``mfsim_response(...) / (1 - alpha) == targets``.
    """
    t = np.asarray(targets, dtype=complex).ravel()
    mag = np.abs(t)
    bad = np.flatnonzero(mag > 1 + 1e-12)
    if bad.size:
        raise InfeasibleAmplitudeError(bad)
    topology = topology or WiredTopology.adjacent(t.size)
    if topology.n_second != t.size:
        raise ShapeError("topology size does not match the number of targets")
    spread = np.arccos(np.clip(mag, 0.0, 1.0))
    centre = np.angle(t)
    theta = np.empty(topology.n_first)
    theta[topology.pairs[:, 0]] = centre + spread
    theta[topology.pairs[:, 1]] = centre - spread
    return PhaseProfile(theta), PhaseProfile.zeros(t.size)


def subarea_feed_map(geometry: LayerGeometry, n_feeds: int) -> np.ndarray:
    """Ideal wired feed network: feed k drives its own rectangular block of sites.

    The grid is cut into ``kr x kc = n_feeds`` blocks (the most square
    factorisation); each feed's unit power is split evenly over its block.
    """
    kr = max(d for d in range(1, int(math.isqrt(n_feeds)) + 1) if n_feeds % d == 0)
    kc = n_feeds // kr
    if kr > geometry.rows or kc > geometry.cols:
        raise ShapeError("more sub-areas than grid rows/columns")
    r, c = np.meshgrid(np.arange(geometry.rows), np.arange(geometry.cols), indexing="ij")
    band_r = (r.ravel() * kr) // geometry.rows
    band_c = (c.ravel() * kc) // geometry.cols
    owner = band_r * kc + band_c
    B = np.zeros((geometry.size, n_feeds))
    for k in range(n_feeds):
        members = owner == k
        B[members, k] = 1 / math.sqrt(members.sum())
    return B


def mfsim_matrix(theta_first: PhaseProfile, phi_second: PhaseProfile, topology: WiredTopology,
                 alpha: float, feed_map: np.ndarray) -> np.ndarray:
    """Aperture x feed response: per-atom gains applied to the wired feed distribution."""
    g = mfsim_response(theta_first, phi_second, topology, alpha)
    return g[:, None] * np.asarray(feed_map)


def film_coupling(spec: FILM, displacements: Sequence[DisplacementProfile], lam: float) -> np.ndarray:
    g1, g2 = spec.geometries
    d1, d2 = displacements
    for geo, d in zip(spec.geometries, displacements):
        if d.offsets.shape[0] != geo.size:
            raise ShapeError("one displacement per atom required")
        if np.any(np.abs(d.offsets) > spec.bound + 1e-15):
            raise DisplacementBoundError("displacement exceeds the morphing range")
    q1 = g1.positions() + d1.offsets
    q2 = g2.positions() + d2.offsets
    if np.any(q2[:, None, 2] <= q1[None, :, 2]):
        raise PropagationError("displaced layers overlap")
    return coupling_from_positions(q1, q2, lam, g1.atom_area)


def film_response(spec: Union[ArchitectureSpec, FILM], profiles: Sequence[PhaseProfile],
                  displacements: Sequence[DisplacementProfile], input_coupling, lam: float) -> np.ndarray:
    """``(1-a) Phi_2 W(displaced) Phi_1 W_1``; the feed coupling stays at nominal positions."""
    if isinstance(spec, ArchitectureSpec):
        variant, alpha = spec.variant, spec.attenuation_ratio
    else:
        variant, alpha = spec, 0.0
    if len(profiles) != 2 or len(displacements) != 2:
        raise ShapeError("FILM needs two phase and two displacement profiles")
    W = film_coupling(variant, displacements, lam)
    W1 = _as_matrix(input_coupling)
    G = np.exp(1j * profiles[0].phases)[:, None] * W1
    G = np.exp(1j * profiles[1].phases)[:, None] * (W @ G)
    return (1 - alpha) * G


def effective_downlink(sim_output, channel) -> np.ndarray:
    H = channel.matrix if hasattr(channel, "matrix") else np.asarray(channel)
    G = np.asarray(sim_output)
    if G.ndim == 1:
        G = G[:, None]
    if H.shape[-1] != G.shape[0]:
        raise ShapeError(f"channel has {H.shape[-1]} columns but SIM output has {G.shape[0]} rows")
    return H @ G


# ---------------------------------------------------------------------------
# batched parameterised models (used by the optimizers)
# ---------------------------------------------------------------------------

def _H(a):
    return np.conj(np.swapaxes(a, -1, -2))


@dataclass
class Block:
    """A contiguous slice of the parameter vector."""

    name: str
    start: int
    stop: int
    kind: str  # "phase" or "displacement"
    scale: float = 1.0

    @property
    def slice(self):
        return slice(self.start, self.stop)


class Model:
    """Flat-parameter forward map ``x -> G`` with a reverse-mode pullback."""

    blocks: list
    n_params: int
    n_feeds: int
    n_out: int

    def forward(self, x):
        raise NotImplementedError

    def pullback(self, cache, Gbar):
        raise NotImplementedError

    def response(self, x):
        return self.forward(x)[0]

    def project(self, x):
        x = np.array(x, dtype=float, copy=True)
        for b in self.blocks:
            if b.kind == "phase":
                x[..., b.slice] = wrap_phase(x[..., b.slice])
            else:
                x[..., b.slice] = np.clip(x[..., b.slice], -b.scale, b.scale)
        return x

    def initial(self, rng: np.random.Generator) -> np.ndarray:
        x = np.zeros(self.n_params)
        for b in self.blocks:
            if b.kind == "phase":
                x[b.slice] = rng.uniform(0, TWO_PI, b.stop - b.start)
        return x


class ConventionalModel(Model):
    def __init__(self, couplings: Sequence[np.ndarray], attenuation_ratio: float = 0.0):
        self.W = [np.asarray(w, dtype=complex) for w in couplings]
        self.L = len(self.W)
        for a, b in zip(self.W, self.W[1:]):
            if b.shape[1] != a.shape[0]:
                raise ShapeError("coupling chain dimensions are inconsistent")
        self.gain = math.sqrt(1 - attenuation_ratio) ** self.L
        sizes = [w.shape[0] for w in self.W]
        offs = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
        self.blocks = [Block(f"layer{l + 1}", offs[l], offs[l + 1], "phase") for l in range(self.L)]
        self.n_params = int(offs[-1])
        self.n_feeds = self.W[0].shape[1]
        self.n_out = sizes[-1]

    @classmethod
    def from_spec(cls, spec: ArchitectureSpec, input_coupling, lam: float) -> "ConventionalModel":
        W1 = _as_matrix(input_coupling)
        return cls([W1] + inter_layer_couplings(spec.variant.geometries, lam), spec.attenuation_ratio)

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        phasors, U = [], []
        G = None
        for b, W in zip(self.blocks, self.W):
            ph = np.exp(1j * x[..., b.slice])
            G = np.broadcast_to(W, x.shape[:-1] + W.shape) if G is None else W @ G
            G = ph[..., None] * G
            phasors.append(ph)
            U.append(G)
        return self.gain * G, (phasors, U)

    def pullback(self, cache, Gbar):
        phasors, U = cache
        bar = self.gain * Gbar
        grads = []
        for l in range(self.L - 1, -1, -1):
            grads.append(-2 * np.imag(np.sum(np.conj(bar) * U[l], axis=-1)))
            if l:
                bar = _H(self.W[l]) @ (np.conj(phasors[l])[..., None] * bar)
        return np.concatenate(grads[::-1], axis=-1)


class MFSIMModel(Model):
    """Parameters ``[theta (2N), phi (N)]``; response ``diag(g) @ feed_map``."""

    def __init__(self, topology: WiredTopology, feed_map: np.ndarray, attenuation_ratio: float = 0.0):
        self.topology = topology
        self.B = np.asarray(feed_map)
        n1, n2 = topology.n_first, topology.n_second
        if self.B.shape[0] != n2:
            raise ShapeError("feed map rows must match the second layer")
        self.scale = 1 - attenuation_ratio
        self.blocks = [Block("theta_first", 0, n1, "phase"), Block("phi_second", n1, n1 + n2, "phase")]
        self.n_params = n1 + n2
        self.n_feeds = self.B.shape[1]
        self.n_out = n2

    def gains(self, x):
        x = np.asarray(x, dtype=float)
        n1 = self.topology.n_first
        ea = np.exp(1j * x[..., self.topology.pairs[:, 0]])
        eb = np.exp(1j * x[..., self.topology.pairs[:, 1]])
        ephi = np.exp(1j * x[..., n1:])
        return self.scale * ephi * 0.5 * (ea + eb), (ea, eb, ephi)

    def forward(self, x):
        g, parts = self.gains(x)
        return g[..., None] * self.B, (g, parts)

    def pullback(self, cache, Gbar):
        g, (ea, eb, ephi) = cache
        gbar = np.sum(Gbar * self.B, axis=-1)
        grad = np.zeros(g.shape[:-1] + (self.n_params,))
        n1 = self.topology.n_first
        grad[..., n1:] = -2 * np.imag(np.conj(gbar) * g)
        half = 0.5 * self.scale * ephi
        grad[..., self.topology.pairs[:, 0]] = -2 * np.imag(np.conj(gbar) * half * ea)
        grad[..., self.topology.pairs[:, 1]] = -2 * np.imag(np.conj(gbar) * half * eb)
        return grad


def _complex(re_part, im_part):
    out = np.empty(re_part.shape, dtype=complex)
    out.real, out.imag = re_part, im_part
    return out


def _rs_core(delta, lam, area):
    """RS kernel for separations ``delta = dst - src``; also returns reusable pieces."""
    return _rs_core_xyz(delta[..., 0], delta[..., 1], delta[..., 2], lam, area)


def _rs_core_xyz(dx, dy, dz, lam, area):
    """``_rs_core`` on separate (contiguous) coordinate arrays.

    Evaluated in real arithmetic (cos/sin instead of a complex exp), which is
    the hot loop of the FILM optimiser.
    """
    inv_d = 1 / np.sqrt(dx * dx + dy * dy + dz * dz)
    kd = (TWO_PI / lam) / inv_d
    cs, sn = np.cos(kd), np.sin(kd)
    # f = (a - i b) e^{ikd} = p + i q
    inv_d2 = inv_d * inv_d
    a = inv_d2 * inv_d * (1 / TWO_PI)
    b = inv_d2 * (1 / lam)
    p = a * cs + b * sn
    q = a * sn - b * cs
    amp = area * np.abs(dz)
    W = _complex(amp * p, amp * q)
    return W, (dz, inv_d, a, b, cs, sn, p, q)


def _rs_slopes(parts, lam, area):
    """``(radial, axial)`` with ``dW/ddelta = radial * delta + axial * e_z`` elementwise."""
    dz, inv_d, a, b, cs, sn, p, q = parts
    k = TWO_PI / lam
    # d/dd of (a - i b) e^{ikd} = (h_r + i h_i) e^{ikd}
    h_r = k * b - 3 * a * inv_d
    h_i = k * a + 2 * b * inv_d
    amp = area * np.abs(dz) * inv_d
    radial = _complex(amp * (h_r * cs - h_i * sn), amp * (h_r * sn + h_i * cs))
    sgn = area * np.sign(dz)
    axial = _complex(sgn * p, sgn * q)
    return radial, axial


def _rs_parts(delta, lam, area):
    W, parts = _rs_core(delta, lam, area)
    return (W,) + _rs_slopes(parts, lam, area)


def _rs_with_derivative(delta, lam, area):
    """RS kernel and its gradient w.r.t. the separation vector ``delta = dst - src``."""
    W, radial, axial = _rs_parts(delta, lam, area)
    dW = radial[..., None] * delta
    dW[..., 2] += axial
    return W, dW


class FILMModel(Model):
    """Parameters ``[theta1, theta2, offsets1 (N1*3), offsets2 (N2*3)]``.

    Only the inter-layer coupling depends on the offsets; the feed coupling is
    fixed at the nominal first-layer positions.
    """

    MEMO_SIZE = 16

    def __init__(self, input_coupling, first: LayerGeometry, second: LayerGeometry, lam: float,
                 bound: float, attenuation_ratio: float = 0.0):
        self.W1 = _as_matrix(input_coupling)
        self.p1, self.p2 = first.positions(), second.positions()
        self.area, self.lam, self.bound = first.atom_area, lam, bound
        self.scale = 1 - attenuation_ratio
        n1, n2 = first.size, second.size
        if self.W1.shape[0] != n1:
            raise ShapeError("input coupling rows must match the first layer")
        o = np.cumsum([0, n1, n2, 3 * n1, 3 * n2])
        self.blocks = [Block("theta1", o[0], o[1], "phase"), Block("theta2", o[1], o[2], "phase"),
                       Block("offsets1", o[2], o[3], "displacement", bound),
                       Block("offsets2", o[3], o[4], "displacement", bound)]
        self.n_params = int(o[-1])
        self.n_feeds = self.W1.shape[1]
        self.n_out = n2
        self.n1, self.n2 = n1, n2
        self._memo = OrderedDict()

    @classmethod
    def from_spec(cls, spec: ArchitectureSpec, input_coupling, lam: float) -> "FILMModel":
        v = spec.variant
        return cls(input_coupling, v.geometries[0], v.geometries[1], lam, v.bound, spec.attenuation_ratio)

    def positions(self, x):
        x = np.asarray(x, dtype=float)
        b1, b2 = self.blocks[2], self.blocks[3]
        q1 = self.p1 + x[..., b1.slice].reshape(x.shape[:-1] + (self.n1, 3))
        q2 = self.p2 + x[..., b2.slice].reshape(x.shape[:-1] + (self.n2, 3))
        return q1, q2

    def coupling(self, x, with_derivative=False):
        q1, q2 = self.positions(x)
        delta = q2[..., :, None, :] - q1[..., None, :, :]
        if with_derivative:
            return _rs_with_derivative(delta, self.lam, self.area)
        return _rs_parts(delta, self.lam, self.area)[0]

    def _separations(self, q1, q2):
        d = [q2[..., :, None, c] - q1[..., None, :, c] for c in range(3)]
        return _rs_core_xyz(*d, self.lam, self.area)

    def _kernel(self, x, q1, q2):
        """RS coupling for each batch row, reusing rows whose offsets were seen recently.

        Phase-only updates leave the offsets untouched, so about half of the
        optimiser's evaluations hit this memo.
        """
        if x.ndim != 2:
            return self._separations(q1, q2)
        offs = x[:, self.blocks[2].start:]
        keys = [r.tobytes() for r in offs]
        found = {k: self._memo[k] for k in keys if k in self._memo}
        miss = [i for i, k in enumerate(keys) if k not in found]
        if miss:
            m = np.array(miss)
            W, parts = self._separations(q1[m], q2[m])
            for j, i in enumerate(miss):
                found[keys[i]] = (W[j], tuple(p[j] for p in parts))
        for k in keys:
            self._memo[k] = found[k]
            self._memo.move_to_end(k)
        while len(self._memo) > self.MEMO_SIZE:
            self._memo.popitem(last=False)
        if len(miss) == len(keys):
            return W, parts
        if len(keys) == 1:
            W, parts = found[keys[0]]
            return W[None], tuple(p[None] for p in parts)
        rows = [found[k] for k in keys]
        W = np.stack([r[0] for r in rows])
        parts = tuple(np.stack([r[1][p] for r in rows]) for p in range(len(rows[0][1])))
        return W, parts

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        q1, q2 = self.positions(x)
        W, parts = self._kernel(x, q1, q2)
        e1 = np.exp(1j * x[..., self.blocks[0].slice])
        e2 = np.exp(1j * x[..., self.blocks[1].slice])
        V = e1[..., None] * self.W1
        G = e2[..., None] * (W @ V)
        return self.scale * G, (W, parts, q1, q2, e2, V, G)

    def pullback(self, cache, Gbar):
        W, parts, q1, q2, e2, V, G = cache
        bar = self.scale * Gbar
        lead = bar.shape[:-2]
        grad = np.zeros(lead + (self.n_params,))
        grad[..., self.blocks[1].slice] = -2 * np.imag(np.sum(np.conj(bar) * G, axis=-1))
        Ybar = np.conj(e2)[..., None] * bar
        Vbar = _H(W) @ Ybar
        grad[..., self.blocks[0].slice] = -2 * np.imag(np.sum(np.conj(Vbar) * V, axis=-1))
        Wbar = Ybar @ _H(V)
        # contract dW/ddelta without materialising the (N2, N1, 3) tensor:
        # sum_n a_mn delta_mn = a.sum(n) q2_m - a @ q1, and the mirror sum over m
        radial, axial = _rs_slopes(parts, self.lam, self.area)
        a = 2 * np.real(np.conj(Wbar) * radial)
        c = 2 * np.real(np.conj(Wbar) * axial)
        g2 = a.sum(axis=-1)[..., None] * q2 - a @ q1
        g1 = np.swapaxes(a, -1, -2) @ q2 - a.sum(axis=-2)[..., None] * q1
        g2[..., 2] += c.sum(axis=-1)
        g1[..., 2] += c.sum(axis=-2)
        grad[..., self.blocks[3].slice] = g2.reshape(lead + (3 * self.n2,))
        grad[..., self.blocks[2].slice] = -g1.reshape(lead + (3 * self.n1,))
        return grad
