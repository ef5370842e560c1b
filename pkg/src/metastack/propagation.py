"""Physical-layer kernels.

Wavelengths, Rayleigh-Sommerfeld coupling between meta-atom layers, path
loss, Rayleigh fading and planar-array steering vectors.  Everything here is
a pure function of its arguments; random draws are keyed by explicit seeds.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0


class PropagationError(ValueError):
    """Raised for invalid physical inputs (non-positive lengths, singular geometry)."""


def substream(seed: int, *index: int) -> np.random.Generator:
    """Independent generator for ``(seed, *index)``.

    Streams are keyed by position in the task grid rather than by draw order,
    so results do not depend on how tasks are scheduled across workers.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(i) for i in index))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, *index: int) -> int:
    """63-bit integer seed for task ``(seed, *index)``, for APIs that take a plain seed."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(i) for i in index))
    hi, lo = ss.generate_state(2, np.uint32)
    return (int(hi) << 32 | int(lo)) >> 1


@dataclass(frozen=True)
class LayerGeometry:
    """A centered rectangular grid of meta-atoms lying in the plane ``z = z_offset``."""

    rows: int
    cols: int
    atom_spacing: float
    atom_area: float
    z_offset: float = 0.0

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise PropagationError(f"grid must be at least 1x1, got {self.rows}x{self.cols}")
        if not self.atom_spacing > 0:
            raise PropagationError("atom_spacing must be positive")
        if not self.atom_area > 0:
            raise PropagationError("atom_area must be positive")
        if not self.z_offset >= 0:
            raise PropagationError("z_offset must be non-negative")

    @classmethod
    def half_wavelength(cls, rows: int, cols: int, lam: float, z_offset: float = 0.0) -> "LayerGeometry":
        """Grid with lambda/2 pitch and atom area (lambda/2)**2."""
        return cls(rows, cols, lam / 2, (lam / 2) ** 2, z_offset)

    @property
    def size(self) -> int:
        return self.rows * self.cols

    def at(self, z_offset: float) -> "LayerGeometry":
        return LayerGeometry(self.rows, self.cols, self.atom_spacing, self.atom_area, z_offset)

    def positions(self) -> np.ndarray:
        """``(size, 3)`` atom coordinates, row-major (row index varies slowest)."""
        r, c = np.meshgrid(np.arange(self.rows), np.arange(self.cols), indexing="ij")
        x = (c.ravel() - (self.cols - 1) / 2) * self.atom_spacing
        y = (r.ravel() - (self.rows - 1) / 2) * self.atom_spacing
        z = np.full(x.shape, float(self.z_offset))
        return np.column_stack([x, y, z])


@dataclass(frozen=True)
class ComplexCoupling:
    """Transmission matrix; entry ``(m, n)`` maps source atom n to destination atom m."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=complex)
        if m.ndim != 2:
            raise PropagationError("coupling matrix must be 2-D")
        if not np.all(np.isfinite(m)):
            raise PropagationError("coupling matrix has non-finite entries")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape


@dataclass(frozen=True)
class ChannelRealization:
    matrix: np.ndarray
    seed: int
    mean_power: float = field(default=1.0)


def wavelength(carrier_hz: float) -> float:
    if not carrier_hz > 0:
        raise PropagationError(f"carrier frequency must be positive, got {carrier_hz}")
    return SPEED_OF_LIGHT / carrier_hz


def _rs_kernel(src: np.ndarray, dst: np.ndarray, lam: float, area: float) -> np.ndarray:
    # src (..., 3), dst (..., 3), broadcast against each other
    delta = dst - src
    d = np.sqrt(np.sum(delta * delta, axis=-1))
    if np.any(d == 0):
        raise PropagationError("coincident source and destination atoms")
    cos_chi = np.abs(delta[..., 2]) / d
    return (area * cos_chi / d) * (1 / (2 * np.pi * d) - 1j / lam) * np.exp(2j * np.pi * d / lam)


def rs_coefficient(src: Sequence[float], dst: Sequence[float], lam: float, area: float) -> complex:
    """Rayleigh-Sommerfeld transmission gain from a point atom at ``src`` to ``dst``.

    ``w = (A cos(chi) / d) (1/(2 pi d) - i/lam) exp(i 2 pi d / lam)`` with chi
    the angle between the link and the stack (z) axis.
    """
    if not lam > 0 or not area > 0:
        raise PropagationError("wavelength and area must be positive")
    return complex(_rs_kernel(np.asarray(src, float), np.asarray(dst, float), lam, area))


def coupling_from_positions(src_pos: np.ndarray, dst_pos: np.ndarray, lam: float,
                            area: float) -> np.ndarray:
    """Raw RS matrix (len(dst_pos), len(src_pos)) for explicit coordinate sets."""
    return _rs_kernel(src_pos[None, :, :], dst_pos[:, None, :], lam, area)


def build_coupling(src: LayerGeometry, dst: LayerGeometry, lam: float) -> ComplexCoupling:
    if not dst.z_offset > src.z_offset:
        raise PropagationError(
            f"destination layer must lie beyond the source (z {dst.z_offset} <= {src.z_offset})")
    if not lam > 0:
        raise PropagationError("wavelength must be positive")
    return ComplexCoupling(coupling_from_positions(src.positions(), dst.positions(), lam, src.atom_area))


def path_loss(distance: float, exponent: float, lam: float) -> float:
    """Linear power gain: free-space gain at the 1 m reference, exponent law beyond it."""
    if distance < 1:
        raise PropagationError(f"distance {distance} m is below the 1 m reference")
    if not exponent > 0:
        raise PropagationError("path-loss exponent must be positive")
    return (lam / (4 * np.pi)) ** 2 * distance ** (-exponent)


def rayleigh_channel(rx: int, tx: int, mean_power: float, seed: int) -> ChannelRealization:
    """i.i.d. CN(0, mean_power) matrix; bit-identical for a given seed."""
    if rx < 1 or tx < 1:
        raise PropagationError("channel dimensions must be positive")
    if not mean_power > 0:
        raise PropagationError("mean_power must be positive")
    rng = substream(seed)
    g = rng.standard_normal((2, rx, tx))
    h = np.sqrt(mean_power / 2) * (g[0] + 1j * g[1])
    return ChannelRealization(h, int(seed), float(mean_power))


def direction(azimuth: float, elevation: float) -> np.ndarray:
    """Unit vector; azimuth rotates in the x-z plane, elevation tilts toward +y.

    ``(0, 0)`` is broadside (+z, normal to the layers).
    """
    ce = np.cos(elevation)
    return np.array([ce * np.sin(azimuth), np.sin(elevation), ce * np.cos(azimuth)])


def steering_vector(azimuth: float, elevation: float, geometry: LayerGeometry, lam: float) -> np.ndarray:
    k = 2 * np.pi / lam
    return np.exp(1j * k * (geometry.positions() @ direction(azimuth, elevation)))


def steering_matrix(angles: Sequence[tuple[float, float]], geometry: LayerGeometry, lam: float) -> np.ndarray:
    """Rows are transposed steering vectors, one per ``(azimuth, elevation)``."""
    return np.stack([steering_vector(az, el, geometry, lam) for az, el in angles])
