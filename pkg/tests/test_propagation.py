import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from metastack.propagation import (LayerGeometry, PropagationError, build_coupling, derive_seed, direction,
                                   path_loss, rayleigh_channel, rs_coefficient, steering_matrix,
                                   steering_vector, substream, wavelength)


def test_wavelength_28ghz():
    assert wavelength(28e9) == pytest.approx(0.0107068735, rel=1e-12)


@pytest.mark.parametrize("f", [0.0, -1.0])
def test_wavelength_rejects_non_positive(f):
    with pytest.raises(PropagationError):
        wavelength(f)


def test_path_loss_reference_value(lam):
    # (lam / 4 pi)^2 * 150^-2.5 evaluated independently
    assert path_loss(150.0, 2.5, lam) == pytest.approx(2.6343742186137257e-12, rel=1e-12)


def test_path_loss_at_reference_distance_is_free_space(lam):
    assert path_loss(1.0, 3.7, lam) == pytest.approx((lam / (4 * math.pi)) ** 2)


@pytest.mark.parametrize("d,n", [(0.5, 2.0), (10.0, 0.0), (10.0, -1.0)])
def test_path_loss_rejects_bad_inputs(lam, d, n):
    with pytest.raises(PropagationError):
        path_loss(d, n, lam)


def test_rs_coefficient_regression(lam):
    w = rs_coefficient((0, 0, 0), (0.003, -0.004, 0.005), lam, (lam / 2) ** 2)
    assert w == pytest.approx(-0.2608025188478721 + 0.0882682834404416j, rel=1e-12)


def test_rs_coefficient_vanishes_in_plane(lam):
    assert rs_coefficient((0, 0, 0), (0.01, 0, 0), lam, 1e-5) == 0


def test_coincident_atoms_raise(lam):
    with pytest.raises(PropagationError):
        rs_coefficient((0, 0, 0), (0, 0, 0), lam, 1e-5)


@given(st.floats(1e-3, 0.1), st.floats(1.01, 10.0))
def test_rs_magnitude_decays_along_the_axis(dz, factor):
    lam = wavelength(28e9)
    a = abs(rs_coefficient((0, 0, 0), (0, 0, dz), lam, 1e-5))
    b = abs(rs_coefficient((0, 0, 0), (0, 0, factor * dz), lam, 1e-5))
    assert b < a


@given(st.floats(1e-3, 0.1), st.floats(-0.05, 0.05), st.floats(-0.05, 0.05))
def test_rs_symmetric_under_mirroring(dz, dx, dy):
    lam = wavelength(28e9)
    a = rs_coefficient((0, 0, 0), (dx, dy, dz), lam, 1e-5)
    assert rs_coefficient((0, 0, 0), (-dx, -dy, dz), lam, 1e-5) == pytest.approx(a, rel=1e-12)
    assert rs_coefficient((dx, dy, dz), (0, 0, 0), lam, 1e-5) == pytest.approx(a, rel=1e-12)


def test_layer_positions_centered_and_row_major(lam):
    g = LayerGeometry.half_wavelength(2, 3, lam, 0.01)
    p = g.positions()
    assert p.shape == (6, 3)
    np.testing.assert_allclose(p.mean(axis=0), [0, 0, 0.01], atol=1e-15)
    # second atom sits one pitch to the right of the first, same row
    np.testing.assert_allclose(p[1] - p[0], [lam / 2, 0, 0])
    np.testing.assert_allclose(p[3] - p[0], [0, lam / 2, 0])


@pytest.mark.parametrize("kw", [dict(rows=0), dict(atom_spacing=0.0), dict(atom_area=-1.0),
                                dict(z_offset=-0.1)])
def test_layer_geometry_validation(kw):
    base = dict(rows=2, cols=2, atom_spacing=0.005, atom_area=2.5e-5, z_offset=0.0)
    base.update(kw)
    with pytest.raises(PropagationError):
        LayerGeometry(**base)


def test_build_coupling_matches_pointwise_coefficients(lam):
    a = LayerGeometry.half_wavelength(2, 2, lam, 0.0)
    b = LayerGeometry.half_wavelength(3, 1, lam, 0.005)
    W = build_coupling(a, b, lam).matrix
    assert W.shape == (3, 4)
    pa, pb = a.positions(), b.positions()
    for m in range(3):
        for n in range(4):
            assert W[m, n] == pytest.approx(rs_coefficient(pa[n], pb[m], lam, a.atom_area), rel=1e-13)


def test_build_coupling_requires_increasing_z(lam):
    a = LayerGeometry.half_wavelength(2, 2, lam, 0.01)
    with pytest.raises(PropagationError):
        build_coupling(a, a.at(0.005), lam)


def test_rayleigh_channel_deterministic_and_scaled():
    a = rayleigh_channel(4, 100, 2.0, 7).matrix
    b = rayleigh_channel(4, 100, 2.0, 7).matrix
    assert np.array_equal(a, b)
    assert not np.array_equal(a, rayleigh_channel(4, 100, 2.0, 8).matrix)
    big = rayleigh_channel(200, 200, 2.0, 1).matrix
    assert np.mean(np.abs(big) ** 2) == pytest.approx(2.0, rel=0.02)


def test_substreams_are_keyed_by_index():
    x = substream(1, 2, 3).standard_normal(4)
    assert np.array_equal(x, substream(1, 2, 3).standard_normal(4))
    assert not np.array_equal(x, substream(1, 3, 2).standard_normal(4))


@given(st.integers(0, 2 ** 64 - 1), st.lists(st.integers(0, 1000), max_size=3))
def test_derive_seed_is_63_bit(seed, index):
    s = derive_seed(seed, *index)
    assert 0 <= s < 2 ** 63
    assert s == derive_seed(seed, *index)


def test_direction_broadside_is_z():
    np.testing.assert_allclose(direction(0.0, 0.0), [0, 0, 1])


@given(st.floats(-1.5, 1.5), st.floats(-1.5, 1.5))
def test_steering_vector_unit_modulus(az, el):
    lam = wavelength(28e9)
    v = steering_vector(az, el, LayerGeometry.half_wavelength(3, 4, lam), lam)
    np.testing.assert_allclose(np.abs(v), 1.0, rtol=1e-13)


def test_steering_matrix_rows(lam):
    g = LayerGeometry.half_wavelength(10, 10, lam)
    A = steering_matrix([(0.1, 0.0), (-0.2, 0.1)], g, lam)
    assert A.shape == (2, 100)
    np.testing.assert_allclose(A[1], steering_vector(-0.2, 0.1, g, lam))
