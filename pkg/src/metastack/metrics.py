"""Link metrics: equal-power MIMO capacity, Monte Carlo QPSK BER and its AWGN oracle."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erfc

from .propagation import substream

LN2 = math.log(2.0)


class NumericalError(ArithmeticError):
    pass


@dataclass(frozen=True)
class Scenario:
    carrier_hz: float = 28e9
    tx_power_dbm: float = 20.0
    noise_dbm: float = -110.0
    pathloss_exponent: float = 2.5
    link_distance_m: float = 150.0
    num_streams_or_users: int = 4
    attenuation_ratio: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.tx_power_dbm) and math.isfinite(self.noise_dbm)):
            raise ValueError("powers must be finite")
        if self.num_streams_or_users < 1:
            raise ValueError("need at least one stream/user")
        if not 0 <= self.attenuation_ratio < 1:
            raise ValueError("attenuation_ratio must lie in [0, 1)")
        if not self.carrier_hz > 0:
            raise ValueError("carrier must be positive")

    @property
    def tx_power_w(self) -> float:
        return dbm_to_watts(self.tx_power_dbm)

    @property
    def noise_w(self) -> float:
        return dbm_to_watts(self.noise_dbm)


@dataclass
class BerCurve:
    power_dbm_points: np.ndarray
    ber_values: np.ndarray
    symbols_simulated: np.ndarray
    seed: int = 0

    def __post_init__(self):
        self.power_dbm_points = np.asarray(self.power_dbm_points, dtype=float)
        self.ber_values = np.asarray(self.ber_values, dtype=float)
        self.symbols_simulated = np.asarray(self.symbols_simulated, dtype=np.int64)
        n = self.power_dbm_points.size
        if self.ber_values.size != n or self.symbols_simulated.size != n:
            raise ValueError("BER curve arrays must have equal length")
        if np.any((self.ber_values < 0) | (self.ber_values > 1)):
            raise ValueError("BER values must lie in [0, 1]")


def dbm_to_watts(p_dbm: float):
    return 10.0 ** ((np.asarray(p_dbm, dtype=float) - 30.0) / 10.0) if np.ndim(p_dbm) else \
        10.0 ** ((float(p_dbm) - 30.0) / 10.0)


def watts_to_dbm(p_w):
    return 10.0 * np.log10(p_w) + 30.0


# ---------------------------------------------------------------------------
# capacity
# ---------------------------------------------------------------------------

def capacity(effective, tx_power_w: float, noise_w: float, streams: int) -> float:
    """Sum of ``log2(1 + (P/S) sigma_s^2 / N)`` over the S strongest singular values.

    Works on stacked matrices too, returning one value per matrix.
    """
    E = np.asarray(effective)
    if not np.all(np.isfinite(E)):
        raise NumericalError("effective channel has non-finite entries")
    if streams > min(E.shape[-2:]):
        raise ValueError(f"{streams} streams exceed the channel rank bound {min(E.shape[-2:])}")
    s = np.linalg.svd(E, compute_uv=False)[..., :streams]
    out = np.sum(np.log2(1 + (tx_power_w / streams) * s * s / noise_w), axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def capacity_and_grad(E, snr_per_stream: float, streams: int):
    """Capacity (bits/s/Hz) of stacked ``E`` and its Wirtinger gradient ``dC/dconj(E)``.

    ``snr_per_stream`` is ``(P/S)/N`` in linear units.
    """
    rho = snr_per_stream
    m, k = E.shape[-2:]
    if streams == min(m, k):
        # log det form stays smooth where singular values coincide
        EhE = np.swapaxes(E.conj(), -1, -2) @ E if k <= m else E @ np.swapaxes(E.conj(), -1, -2)
        A = np.eye(EhE.shape[-1]) + rho * EhE
        sign, logdet = np.linalg.slogdet(A)
        C = logdet / LN2
        Ainv = np.linalg.inv(A)
        if k <= m:
            grad = (rho / LN2) * (E @ Ainv)
        else:
            grad = (rho / LN2) * (Ainv @ E)
        return C, grad
    U, s, Vh = np.linalg.svd(E, full_matrices=False)
    U, s, Vh = U[..., :streams], s[..., :streams], Vh[..., :streams, :]
    C = np.sum(np.log2(1 + rho * s * s), axis=-1)
    w = rho * s / ((1 + rho * s * s) * LN2)
    grad = (U * w[..., None, :]) @ Vh
    return C, grad


# ---------------------------------------------------------------------------
# bit-error rate
# ---------------------------------------------------------------------------

def qpsk_awgn_oracle(gamma_b):
    """Gray-coded QPSK bit-error rate ``Q(sqrt(2 gamma_b))`` at per-bit SNR ``gamma_b``."""
    g = np.asarray(gamma_b, dtype=float)
    if np.any(g < 0):
        raise ValueError("gamma_b must be non-negative")
    out = 0.5 * erfc(np.sqrt(g))
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class StopRule:
    min_errors: int = 200
    max_symbols: int = 10_000_000
    batch_symbols: int = 100_000

    def __post_init__(self):
        if self.min_errors < 1 or self.max_symbols < 1 or self.batch_symbols < 1:
            raise ValueError("stopping rule counts must be positive")


@dataclass
class BerResult:
    per_user: np.ndarray
    average: float
    symbols: int
    bit_errors: int = field(default=0)


def _check_square(E):
    if E.ndim != 2 or E.shape[0] != E.shape[1]:
        raise ValueError("effective matrix must be square (users x users)")


def _qpsk_errors(E: np.ndarray, amp: float, noise_scale: float, rng: np.random.Generator, n: int):
    """Bit errors per user over ``n`` symbol vectors of Gray-coded QPSK."""
    K = E.shape[0]
    bits = rng.integers(0, 2, size=(2, K, n), dtype=np.int8)
    s = ((1 - 2 * bits[0]) + 1j * (1 - 2 * bits[1])) * (amp / math.sqrt(2))
    noise = rng.standard_normal((2, K, n))
    y = E @ s + noise_scale * (noise[0] + 1j * noise[1])
    # coherent per-user detection: rotate by the conjugate of the own-link gain
    z = y * np.conj(np.diag(E))[:, None]
    err = np.sum((z.real < 0) != (bits[0] == 1), axis=1)
    err += np.sum((z.imag < 0) != (bits[1] == 1), axis=1)
    return err


def ber_qpsk_pooled(effectives, tx_power_w: float, noise_w: float, seed: int,
                    stop: StopRule = StopRule(), stream: tuple = ()) -> BerResult:
    """Monte Carlo BER averaged over several effective matrices sharing one stopping rule.

    Batches are simulated round-robin over the matrices (matrix ``r``, batch
    ``b`` drawn from substream ``(seed, *stream, r, b)``) until the pooled
    bit-error count reaches ``min_errors`` or the pooled symbol count reaches
    ``max_symbols``.  Every matrix sees the same number of symbols, so the
    returned per-user BER is the plain mean over matrices.
    """
    Es = [np.asarray(E, dtype=complex) for E in effectives]
    if not Es:
        raise ValueError("need at least one effective matrix")
    for E in Es:
        _check_square(E)
    if not (tx_power_w > 0 and noise_w > 0):
        raise ValueError("powers must be positive")
    K = Es[0].shape[0]
    amp = math.sqrt(tx_power_w / K)
    scale = math.sqrt(noise_w / 2)
    errors = np.zeros((len(Es), K), dtype=np.int64)
    per_matrix = 0
    b = 0
    R = len(Es)
    while per_matrix * R < stop.max_symbols and errors.sum() < stop.min_errors:
        n = min(stop.batch_symbols, -(-(stop.max_symbols - per_matrix * R) // R))
        for r, E in enumerate(Es):
            errors[r] += _qpsk_errors(E, amp, scale, substream(seed, *stream, r, b), n)
        per_matrix += n
        b += 1
    per_user = errors.sum(axis=0) / (2.0 * per_matrix * R)
    return BerResult(per_user, float(per_user.mean()), per_matrix * R, int(errors.sum()))


def ber_qpsk(effective, tx_power_w: float, noise_w: float, seed: int, stop: StopRule = StopRule(),
             stream: tuple = ()) -> BerResult:
    """Monte Carlo BER of Gray-coded QPSK over ``y = sqrt(P/K) E s + n``.

    User k detects its own symbol coherently from ``conj(E_kk) y_k``; the
    other users' symbols act as interference.  Symbols are drawn in
    fixed-size batches and the run stops after the batch in which the
    bit-error count (summed over users) reaches ``min_errors`` or the symbol
    count reaches ``max_symbols``.
    """
    return ber_qpsk_pooled([effective], tx_power_w, noise_w, seed, stop, stream)
