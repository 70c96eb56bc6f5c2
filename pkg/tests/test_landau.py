import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from kinlab.landau import (
    Potential,
    QuadratureError,
    c_s_constant,
    diffusion_tensor,
    dispersion_function,
    gaussian_potential,
    inverse_speed_moment,
    kappa_threshold_constant,
    lambda_V,
    landau_kernel,
    landau_kernel_bruteforce,
    lenard_balescu_kernel,
    susceptibility_closed_form,
    susceptibility_contour,
)

ZERO = gaussian_potential(3, amplitude=0.0)
vectors = st.lists(st.floats(-3, 3), min_size=3, max_size=3).filter(lambda v: np.linalg.norm(v) > 0.1)


def radial_oracle(f, upper=np.inf):
    val, _ = integrate.quad(f, 0.0, upper, epsabs=0, epsrel=1e-13, limit=200)
    return val


# ---------------------------------------------------------------- constants


def test_lambda_zero_potential():
    assert lambda_V(ZERO) == 0.0


def test_lambda_d3_gaussian_against_radial_oracle():
    # omega_2 pi (2 pi)^-3 int r^3 e^{-2 r^2} dr
    oracle = math.pi * math.pi / (2 * math.pi) ** 3 * radial_oracle(lambda r: r ** 3 * math.exp(-2 * r * r))
    assert lambda_V(gaussian_potential(3)) == pytest.approx(oracle, rel=1e-8)
    assert lambda_V(gaussian_potential(3)) == pytest.approx(1 / (64 * math.pi), rel=1e-12)


def test_lambda_needs_two_dimensions():
    with pytest.raises(ValueError):
        lambda_V(gaussian_potential(1))


@given(c=st.floats(0.1, 10), d=st.sampled_from([2, 3]))
@settings(max_examples=20, deadline=None)
def test_constants_quadratic_and_linear_in_potential(c, d):
    p = gaussian_potential(d)
    assert lambda_V(p.scaled(c)) == pytest.approx(c * c * lambda_V(p), rel=1e-12)
    assert c_s_constant(p.scaled(c), 1) == pytest.approx(c * c * c_s_constant(p, 1), rel=1e-12)
    assert kappa_threshold_constant(p.scaled(c)) == pytest.approx(c * kappa_threshold_constant(p), rel=1e-12)


def test_c_s_d2_s2_against_radial_oracle():
    oracle = 2 * math.pi * radial_oracle(lambda r: (1 + r * r) * math.exp(-2 * r * r))
    assert c_s_constant(gaussian_potential(2), 2) == pytest.approx(oracle, rel=1e-8)
    assert c_s_constant(gaussian_potential(2), 2) == pytest.approx(
        2 * math.pi * (math.sqrt(math.pi / 2) / 2 + math.sqrt(math.pi) / (8 * math.sqrt(2))), rel=1e-10)


def test_c_s_zero_and_first_power_variant():
    assert c_s_constant(ZERO, 0) == 0.0
    p = gaussian_potential(2)
    # int |k| e^{-|k|^2} dk = 2 pi int r^2 e^{-r^2} dr = pi^{3/2}/2
    assert kappa_threshold_constant(p) == pytest.approx(math.pi ** 1.5 / 2, rel=1e-10)
    assert c_s_constant(p, 0) == pytest.approx(2 * math.pi * math.sqrt(2 * math.pi) / 16, rel=1e-10)


def test_c_s_rejects_nonintegrable_order():
    with pytest.raises(ValueError):
        c_s_constant(gaussian_potential(2), 3)
    with pytest.raises(ValueError):
        c_s_constant(gaussian_potential(2), -1)


def test_unresolved_quadrature_is_reported():
    wiggly = Potential(2, 1.0, 8.0, profile=lambda r: 1 + np.cos(400 * r))
    with pytest.raises(QuadratureError):
        lambda_V(wiggly)


# ------------------------------------------------------------- Landau kernel


def test_kernel_e1_in_two_dimensions():
    p = gaussian_potential(2)
    np.testing.assert_allclose(landau_kernel([1.0, 0.0], p).value, lambda_V(p) * np.diag([0.0, 1.0]), atol=1e-15)


@given(w=vectors)
@settings(max_examples=50, deadline=None)
def test_kernel_invariants(w):
    p = gaussian_potential(3)
    w = np.asarray(w)
    b = landau_kernel(w, p)
    assert b.symmetric_error == 0.0
    assert np.abs(b.value @ w).max() <= 1e-15 * np.abs(b.value).max() * np.linalg.norm(w) + 1e-300
    assert np.trace(b.value) == pytest.approx(lambda_V(p) * 2 / np.linalg.norm(w), rel=1e-12)
    assert b.eigenvalues().min() >= -1e-15
    np.testing.assert_allclose(landau_kernel(2 * w, p).value, b.value / 2, rtol=1e-13, atol=1e-17)


def test_kernel_singular_at_zero():
    with pytest.raises(ValueError):
        landau_kernel([0.0, 0.0, 0.0], gaussian_potential(3))
    with pytest.raises(ValueError):
        landau_kernel_bruteforce([0.0, 0.0, 0.0], gaussian_potential(3))


def test_bruteforce_matches_closed_form_e3():
    p = gaussian_potential(3)
    w = np.array([0.0, 0.0, 1.0])
    b = landau_kernel_bruteforce(w, p, delta=0.1, levels=3)
    exact = landau_kernel(w, p).value
    assert np.linalg.norm(b.value - exact, 2) <= 0.01 * np.linalg.norm(exact, 2)
    assert b.diagnostics["widths"] == [0.1, 0.05, 0.025]


@given(w=vectors)
@settings(max_examples=6, deadline=None)
def test_bruteforce_symmetric_and_kills_w(w):
    p = gaussian_potential(3)
    b = landau_kernel_bruteforce(np.asarray(w), p)
    assert b.symmetric_error <= 1e-12 * np.abs(b.value).max()
    # the remainder is O((delta/|w|)^(2 levels)); at width delta/|w| = 0.05 five levels reach round-off
    deep = landau_kernel_bruteforce(np.asarray(w), p, delta=0.05 * np.linalg.norm(w), levels=5).value
    assert np.linalg.norm(deep @ w) <= 1e-10 * np.linalg.norm(deep, 2) * np.linalg.norm(w)


def test_bruteforce_w_component_shrinks_with_width():
    p = gaussian_potential(3)
    w = np.array([0.3, -0.4, 1.2])
    what = w / np.linalg.norm(w)
    comps = [what @ landau_kernel_bruteforce(w, p, delta=dl, levels=1).value @ what for dl in (0.2, 0.1, 0.05)]
    assert comps[0] > comps[1] > comps[2] > 0
    assert comps[1] / comps[2] == pytest.approx(4.0, rel=0.05)


# ---------------------------------------------------------- diffusion tensor


@pytest.mark.parametrize("d", [2, 3])
def test_diffusion_tensor_isotropic_at_origin(d):
    p = gaussian_potential(d)
    # radial oracle for int M(u)/|u| du
    moment = (2 * math.pi) ** (-d / 2) * (2 * math.pi if d == 2 else 4 * math.pi) * radial_oracle(
        lambda r: r ** (d - 2) * math.exp(-r * r / 2))
    assert inverse_speed_moment(d) == pytest.approx(moment, rel=1e-12)
    a = diffusion_tensor(np.zeros(d), p)
    np.testing.assert_allclose(a, lambda_V(p) * (1 - 1 / d) * moment * np.eye(d), rtol=1e-9, atol=1e-14)


def test_diffusion_tensor_rotation_equivariance():
    p = gaussian_potential(2)
    th = 0.7
    rot = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    v = np.array([1.3, -0.4])
    np.testing.assert_allclose(diffusion_tensor(rot @ v, p), rot @ diffusion_tensor(v, p) @ rot.T,
                               rtol=1e-8, atol=1e-12)


def test_diffusion_tensor_psd_on_grid():
    p = gaussian_potential(2)
    axis = np.linspace(-4, 4, 7)
    vs = np.stack(np.meshgrid(axis, axis, indexing="ij"), axis=-1).reshape(-1, 2)
    a = diffusion_tensor(vs, p)
    assert np.abs(a - np.swapaxes(a, 1, 2)).max() == 0.0
    assert np.linalg.eigvalsh(a).min() >= -1e-10


def test_diffusion_tensor_zero_potential():
    assert not diffusion_tensor([0.5, 0.5], gaussian_potential(2, amplitude=0.0)).any()


# ----------------------------------------------------------------- screening


def test_dispersion_zero_potential_is_one():
    assert dispersion_function([1.0, 0.0], 0.3, gaussian_potential(2, amplitude=0.0)) == 1.0


@given(z=st.floats(0.01, 5.0))
@settings(max_examples=25, deadline=None)
def test_dispersion_imaginary_part_odd(z):
    p = gaussian_potential(2)
    k = [0.6, 0.8]
    assert dispersion_function(k, -z, p).imag == pytest.approx(-dispersion_function(k, z, p).imag, abs=1e-12)
    assert dispersion_function(k, -z, p).real == pytest.approx(dispersion_function(k, z, p).real, abs=1e-12)


@pytest.mark.parametrize("z", [-2.0, -0.3, 0.0, 0.7, 1.9, 4.0])
def test_dispersion_matches_contour_oracle(z):
    p = gaussian_potential(2)
    k = np.array([0.9, -0.5])
    kn = float(np.linalg.norm(k))
    # the shifted-contour value does not depend on the shift
    values = [1 + float(p(kn)) * susceptibility_contour(z / kn, 1.0, eta=eta) for eta in (0.25, 0.5, 1.0)]
    assert abs(values[0] - values[2]) < 1e-12
    assert abs(dispersion_function(k, z, p) - values[1]) <= 1e-4
    assert abs(dispersion_function(k, z, p, method="closed") - values[1]) <= 1e-10


def test_dispersion_rejects_zero_k_and_unknown_method():
    p = gaussian_potential(2)
    with pytest.raises(ValueError):
        dispersion_function([0.0, 0.0], 0.1, p)
    with pytest.raises(ValueError):
        dispersion_function([1.0, 0.0], 0.1, p, method="magic")


def test_susceptibility_static_limit():
    # x = 0: int M1'(u)/(-u) du = beta
    assert complex(susceptibility_closed_form(0.0, 2.0)) == pytest.approx(2.0, abs=1e-15)


def test_lenard_balescu_without_screening_is_bruteforce():
    p = gaussian_potential(2)
    w = np.array([0.4, 1.1])
    a = lenard_balescu_kernel([0.3, -0.2], w, p, screen=gaussian_potential(2, amplitude=0.0)).value
    b = landau_kernel_bruteforce(w, p).value
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-16)


def test_lenard_balescu_symmetric_psd():
    p = gaussian_potential(2)
    lb = lenard_balescu_kernel([0.5, 1.0], [1.0, 0.2], p)
    assert lb.symmetric_error <= 1e-15
    assert lb.eigenvalues().min() >= -1e-12


def test_screening_reduces_kernel_at_rest():
    # at v = 0, eps = 1 + Vhat beta > 1 pointwise, so LB <= Landau in the PSD order
    p = gaussian_potential(2)
    w = np.array([0.0, 1.0])
    gap = landau_kernel_bruteforce(w, p).value - lenard_balescu_kernel([0.0, 0.0], w, p).value
    assert np.linalg.eigvalsh(gap).min() >= -1e-12


def test_screening_can_enhance_kernel_away_from_rest():
    # |eps| < 1 is reachable where Re chi < 0, so the entrywise comparison fails
    p = gaussian_potential(2)
    w = np.array([1.0, 0.0])
    v = np.array([0.0, 2.12])
    lb = lenard_balescu_kernel(v, w, p).value
    assert lb[1, 1] > landau_kernel(w, p).value[1, 1]
