import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pimrl import tensor as T
from pimrl.physics import (apply_stencil, apply_stencil_padded, crop_halo, d1_stencil, d3x_stencil,
                           laplacian_stencil, pad_periodic)

from oracles import fd_d3x, fd_laplacian_1d, fd_laplacian_2d


def test_pad_1d_example():
    p = pad_periodic(np.array([[1.0, 2.0, 3.0]]), 1)
    assert p.values.tolist() == [[3, 1, 2, 3, 1]]


def test_pad_constant_2d_and_crop_inverse():
    f = np.full((2, 4, 5), 0.7)
    np.testing.assert_array_equal(pad_periodic(f, 2).values, 0.7)
    g = np.random.default_rng(0).normal(size=(2, 4, 5))
    np.testing.assert_array_equal(crop_halo(pad_periodic(g, 2)), g)


def test_pad_rejects_bad_halo():
    with pytest.raises(ValueError):
        pad_periodic(np.zeros((1, 3)), 4)
    with pytest.raises(ValueError):
        pad_periodic(np.zeros((1, 3)), 0)


def test_stencil_coefficients():
    assert laplacian_stencil(1.0).coefficients.tolist() == [1, -2, 1]
    assert d3x_stencil(1.0).coefficients.tolist() == [-0.5, 1, 0, -1, 0.5]
    assert laplacian_stencil(0.1, ndim=2).coefficients.sum() == pytest.approx(0, abs=1e-9)
    c = d3x_stencil(0.3).coefficients
    np.testing.assert_allclose(c, -c[::-1])
    assert laplacian_stencil(1.0).halo == 1 and d3x_stencil(1.0).halo == 2


def test_laplacian_1d_impulse():
    out = apply_stencil(np.array([[0.0, 1.0, 0.0, 0.0]]), laplacian_stencil(1.0))
    assert out.tolist() == [[1, -2, 1, 0]]


def test_constant_fields_map_to_zero():
    assert np.abs(apply_stencil(np.full((1, 16), 2.0), d3x_stencil(0.25))).max() < 1e-9
    assert np.abs(apply_stencil(np.full((2, 6, 6), 2.0), laplacian_stencil(0.5, 2))).max() < 1e-12


def test_dimension_mismatch_rejected():
    with pytest.raises(ValueError):
        apply_stencil(np.zeros((1, 4, 4)), laplacian_stencil(1.0, ndim=1))


@pytest.mark.parametrize("ndim", [1, 2])
def test_matches_shift_oracle(ndim):
    rng = np.random.default_rng(ndim)
    h = 0.3
    if ndim == 1:
        u = rng.normal(size=(2, 17))
        np.testing.assert_allclose(apply_stencil(u, laplacian_stencil(h)), fd_laplacian_1d(u, h), rtol=1e-12)
        np.testing.assert_allclose(apply_stencil(u, d3x_stencil(h)), fd_d3x(u, h), rtol=1e-11, atol=1e-11)
    else:
        u = rng.normal(size=(2, 9, 11))
        np.testing.assert_allclose(apply_stencil(u, laplacian_stencil(h, 2)), fd_laplacian_2d(u, h),
                                   rtol=1e-12, atol=1e-12)


def test_equals_tensor_conv_on_padded_field():
    rng = np.random.default_rng(4)
    u = rng.normal(size=(1, 10, 12))
    s = laplacian_stencil(0.2, 2)
    p = pad_periodic(u, s.halo).values
    ref = T.conv(T.DiffTensor(p), T.DiffTensor(s.coefficients[None, None]), padding="none").values
    np.testing.assert_allclose(apply_stencil(u, s), ref, atol=1e-12)


@pytest.mark.parametrize("s", [laplacian_stencil(0.1), d3x_stencil(0.25), laplacian_stencil(0.1, 2),
                               d1_stencil(0.1, axis=0, ndim=2)])
def test_halo_paths_agree(s):
    rng = np.random.default_rng(0)
    u = rng.normal(size=(2,) + (13,) * s.ndim)
    assert np.abs(apply_stencil(u, s) - apply_stencil_padded(u, s)).max() <= 1e-14 * np.abs(u).max() / s.spacing ** 3


@given(st.integers(0, 15), st.integers(0, 1000))
def test_shift_equivariance(shift, seed):
    u = np.random.default_rng(seed).normal(size=(1, 16))
    s = d3x_stencil(0.5)
    np.testing.assert_allclose(apply_stencil(np.roll(u, shift, 1), s), np.roll(apply_stencil(u, s), shift, 1),
                               atol=1e-12)


def _conv_ratio(stencil_fn, exact_fn, n=32, L=2 * np.pi):
    errs = []
    for m in (n, 2 * n):
        h = L / m
        x = np.arange(m) * h
        u = np.sin(2 * np.pi * x / L)[None]
        errs.append(np.abs(apply_stencil(u, stencil_fn(h)) - exact_fn(x)[None]).max())
    return errs[0] / errs[1]


def test_second_order_convergence():
    r_lap = _conv_ratio(laplacian_stencil, lambda x: -np.sin(x))
    r_d3 = _conv_ratio(d3x_stencil, lambda x: -np.cos(x))
    assert 3.5 <= r_lap <= 4.5 and 3.5 <= r_d3 <= 4.5
