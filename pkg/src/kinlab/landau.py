"""Interaction constants and limiting collision coefficients.

Conventions: Fourier measure dk/(2pi)^d, Maxwellian
M(v) = (beta/2pi)^{d/2} exp(-beta|v|^2/2), and a radial real profile Vhat(|k|).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy import integrate, special


class QuadratureError(RuntimeError):
    """Two refinement levels of a quadrature disagree beyond tolerance."""


def ball_volume(n: int) -> float:
    """Volume of the unit ball in R^n (1 for n = 0)."""
    return math.pi ** (n / 2) / math.gamma(n / 2 + 1)


def sphere_area(n: int) -> float:
    """Surface area of the unit sphere S^{n-1} in R^n."""
    return n * ball_volume(n)


def gauss_legendre(n: int, a: float, b: float) -> tuple[np.ndarray, np.ndarray]:
    x, w = leggauss(n)
    half = 0.5 * (b - a)
    return a + half * (x + 1.0), half * w


@dataclass(frozen=True)
class Potential:
    """Radial Fourier profile of the pair interaction.

    ``profile`` maps |k| (array) to Vhat(|k|) >= 0.  ``k_max`` is the radial
    cutoff beyond which the profile is treated as zero.
    """
    d: int = 2
    amplitude: float = 1.0
    k_max: float = 8.0
    n_radial: int = 16
    n_angular: int = 12
    profile: Callable[[np.ndarray], np.ndarray] | None = field(default=None, compare=False)

    def __call__(self, r) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        if self.amplitude == 0.0:
            return np.zeros_like(r)
        base = np.exp(-r * r) if self.profile is None else np.asarray(self.profile(r), dtype=float)
        return self.amplitude * np.where(r <= self.k_max, base, 0.0)

    def scaled(self, c: float) -> "Potential":
        return Potential(self.d, self.amplitude * c, self.k_max, self.n_radial, self.n_angular, self.profile)

    def with_dimension(self, d: int) -> "Potential":
        return Potential(d, self.amplitude, self.k_max, self.n_radial, self.n_angular, self.profile)

    @property
    def is_zero(self) -> bool:
        return self.amplitude == 0.0

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "profile": "gaussian" if self.profile is None else "custom",
            "amplitude": self.amplitude,
            "k_max": self.k_max,
            "n_radial": self.n_radial,
            "n_angular": self.n_angular,
        }


def gaussian_potential(d: int = 2, amplitude: float = 1.0, k_max: float = 8.0,
                       n_radial: int = 16, n_angular: int = 12) -> Potential:
    return Potential(d, amplitude, k_max, n_radial, n_angular)


def maxwellian(v, beta: float = 1.0) -> np.ndarray:
    """M(v) for an array of velocities with the dimension on the last axis."""
    v = np.asarray(v, dtype=float)
    d = v.shape[-1]
    return (beta / (2 * math.pi)) ** (d / 2) * np.exp(-0.5 * beta * np.sum(v * v, axis=-1))


def _radial_integral(func: Callable[[np.ndarray], np.ndarray], upper: float, n: int = 200,
                     rtol: float = 1e-10) -> float:
    """Gauss-Legendre on [0, upper] at n and 2n nodes, with agreement check."""
    vals = []
    for m in (n, 2 * n):
        x, w = gauss_legendre(m, 0.0, upper)
        vals.append(float(np.sum(w * func(x))))
    coarse, fine = vals
    scale = max(abs(fine), 1e-300)
    if abs(fine - coarse) > rtol * scale and abs(fine - coarse) > 1e-300:
        raise QuadratureError(f"radial quadrature unresolved: {coarse!r} vs {fine!r}")
    return fine


def lambda_V(p: Potential) -> float:
    """Prefactor of the Landau kernel.

    The angular average of (k.e)^2 delta(k.w) collapses the d-dimensional
    integral to omega_{d-1} pi (2pi)^{-d} int_0^inf r^d Vhat(r)^2 dr.
    """
    if p.d < 2:
        raise ValueError("lambda_V needs d >= 2")
    if p.is_zero:
        return 0.0
    radial = _radial_integral(lambda r: r ** p.d * p(r) ** 2, p.k_max)
    return ball_volume(p.d - 1) * math.pi * (2 * math.pi) ** (-p.d) * radial


def c_s_constant(p: Potential, s: int, power: int = 2) -> float:
    """int <k>^s |k|^{1-s} Vhat(k)^power dk over R^d (no (2pi)^d factor).

    power=2 is the constant of the hat-operator bounds; power=1 at s=0 gives the
    first-power variant int |k| Vhat(k) dk.
    """
    if s < 0:
        raise ValueError("s must be nonnegative")
    if s >= p.d + 1:
        raise ValueError(f"integrand not integrable at k=0 for s={s}, d={p.d}")
    if p.is_zero:
        return 0.0

    def integrand(r):
        return sphere_area(p.d) * r ** (p.d - 1) * (1 + r * r) ** (s / 2) * r ** (1 - s) * p(r) ** power

    return _radial_integral(integrand, p.k_max)


def kappa_threshold_constant(p: Potential) -> float:
    """First-power variant int |k| Vhat(k) dk."""
    return c_s_constant(p, 0, power=1)


@dataclass(frozen=True)
class CollisionTensor:
    value: np.ndarray
    at: np.ndarray
    diagnostics: dict = field(default_factory=dict, compare=False)

    @property
    def symmetric_error(self) -> float:
        return float(np.max(np.abs(self.value - self.value.T)))

    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(0.5 * (self.value + self.value.T))


def landau_kernel(w, p: Potential) -> CollisionTensor:
    w = np.asarray(w, dtype=float)
    norm = float(np.linalg.norm(w))
    if norm == 0.0:
        raise ValueError("Landau kernel is singular at w = 0")
    what = w / norm
    value = lambda_V(p) / norm * (np.eye(len(w)) - np.outer(what, what))
    return CollisionTensor(value, w)


def _orthonormal_complement(u: np.ndarray) -> np.ndarray:
    """Rows spanning the orthogonal complement of unit vector u."""
    d = len(u)
    q, _ = np.linalg.qr(np.column_stack([u, np.eye(d)]))
    basis = q[:, 1:d].T
    return basis


def _perp_nodes(d: int, k_max: float, n_radial: int, n_angular: int):
    """Quadrature nodes/weights on R^{d-1} (the complement of w), radius <= k_max."""
    m = d - 1
    if m == 1:
        x, w = gauss_legendre(2 * n_radial, -k_max, k_max)
        return x[:, None], w
    if m == 2:
        r, wr = gauss_legendre(n_radial, 0.0, k_max)
        th = 2 * math.pi * np.arange(n_angular) / n_angular
        R, T = np.meshgrid(r, th, indexing="ij")
        pts = np.stack([R * np.cos(T), R * np.sin(T)], axis=-1).reshape(-1, 2)
        wts = (wr[:, None] * R * (2 * math.pi / n_angular)).reshape(-1)
        return pts, wts
    x, w = gauss_legendre(n_radial, -k_max, k_max)
    grids = np.meshgrid(*([x] * m), indexing="ij")
    pts = np.stack([g.reshape(-1) for g in grids], axis=-1)
    wts = np.ones(len(pts))
    for g in np.meshgrid(*([w] * m), indexing="ij"):
        wts = wts * g.reshape(-1)
    return pts, wts


def _regularized_kernel(w: np.ndarray, p: Potential, delta: float, weight=None,
                        n_parallel: int = 48, n_radial: int = 64, n_angular: int = 64) -> np.ndarray:
    """int (k x k) pi Vhat^2 rho_delta(k.w) [weight(k)] dk/(2pi)^d in a frame aligned with w."""
    d = len(w)
    norm = float(np.linalg.norm(w))
    what = w / norm
    width = delta / norm  # Gaussian width in the coordinate k.what
    x, wx = gauss_legendre(n_parallel, -10 * width, 10 * width)
    rho = np.exp(-0.5 * (x / width) ** 2) / (math.sqrt(2 * math.pi) * width)
    perp_pts, perp_w = _perp_nodes(d, p.k_max, n_radial, n_angular)
    basis = _orthonormal_complement(what)
    kperp = perp_pts @ basis  # (P, d)
    out = np.zeros((d, d))
    for xi, wi, ri in zip(x, wx, rho):
        k = xi * what[None, :] + kperp
        r = np.linalg.norm(k, axis=1)
        f = math.pi * p(r) ** 2 * perp_w * wi * ri / norm
        if weight is not None:
            f = f * weight(k)
        out += (k * f[:, None]).T @ k
    out /= (2 * math.pi) ** d
    return 0.5 * (out + out.T)


def landau_kernel_bruteforce(w, p: Potential, delta: float = 0.1, levels: int = 3,
                             **quad) -> CollisionTensor:
    """delta-regularised direct quadrature, Richardson-extrapolated over widths
    delta, delta/2, ..., delta/2^(levels-1) assuming an O(delta^2) error."""
    w = np.asarray(w, dtype=float)
    if np.linalg.norm(w) == 0.0:
        raise ValueError("kernel is singular at w = 0")
    if delta <= 0:
        raise ValueError("delta must be positive")
    widths = [delta / 2 ** j for j in range(levels)]
    table = [[_regularized_kernel(w, p, dl, **quad)] for dl in widths]
    # Richardson tableau in delta^2
    for j in range(1, levels):
        for col in range(1, j + 1):
            fac = 4.0 ** col
            table[j].append((fac * table[j][col - 1] - table[j - 1][col - 1]) / (fac - 1))
    value = table[-1][-1]
    diag = {
        "widths": widths,
        "raw": [t[0].tolist() for t in table],
        "extrapolation_change": float(np.linalg.norm(table[-1][-1] - table[-1][0], 2)),
    }
    return CollisionTensor(value, w, diag)


def _angular_nodes(d: int, n_angular: int):
    """Directions and weights on S^{d-1} (weights sum to the sphere area)."""
    if d == 2:
        th = 2 * math.pi * (np.arange(n_angular) + 0.5) / n_angular
        return np.stack([np.cos(th), np.sin(th)], axis=-1), np.full(n_angular, 2 * math.pi / n_angular)
    if d == 3:
        c, wc = leggauss(n_angular)
        ph = 2 * math.pi * (np.arange(2 * n_angular) + 0.5) / (2 * n_angular)
        C, P = np.meshgrid(c, ph, indexing="ij")
        S = np.sqrt(1 - C * C)
        dirs = np.stack([S * np.cos(P), S * np.sin(P), C], axis=-1).reshape(-1, 3)
        wts = (wc[:, None] * np.full(P.shape[1], 2 * math.pi / (2 * n_angular))[None, :]).reshape(-1)
        return dirs, wts
    raise ValueError("angular quadrature implemented for d = 2, 3")


def _diffusion_tensor_raw(v: np.ndarray, lam: float, beta: float, n_radial: int, n_angular: int) -> np.ndarray:
    d = v.shape[-1]
    flat_v = v.reshape(-1, d)
    out = np.zeros((len(flat_v), d, d))
    cache: dict[int, tuple] = {}
    for idx, vi in enumerate(flat_v):
        speed = float(np.linalg.norm(vi)) * math.sqrt(beta)
        # M(v - r theta) narrows in theta like 1/|v|
        n_ang = max(n_angular, 2 * math.ceil(4 * speed))
        if n_ang not in cache:
            dirs, wd = _angular_nodes(d, n_ang)
            proj = np.eye(d)[None, :, :] - dirs[:, :, None] * dirs[:, None, :]
            cache[n_ang] = (dirs, wd, proj)
        dirs, wd, proj = cache[n_ang]
        r, wr = gauss_legendre(n_radial, 0.0, (speed + 12.0) / math.sqrt(beta))
        u = vi[None, None, :] - r[:, None, None] * dirs[None, :, :]  # (R, A, d)
        mw = maxwellian(u, beta) * (wr * r ** (d - 2))[:, None] * wd[None, :]
        out[idx] = lam * np.einsum("ra,aij->ij", mw, proj)
    return out.reshape(v.shape[:-1] + (d, d))


def diffusion_tensor(v, p: Potential, beta: float = 1.0, n_radial: int = 96, n_angular: int = 48,
                     rtol: float = 1e-8) -> np.ndarray:
    """A0(v) = (B0 * M)(v) in polar coordinates centred at v.

    Accepts a single velocity or an array of velocities (last axis = d); the
    result has two trailing (d, d) axes.  The 1/|u| singularity is cancelled by
    the polar Jacobian r^{d-1}.
    """
    v = np.asarray(v, dtype=float)
    single = v.ndim == 1
    vv = v[None, :] if single else v
    d = vv.shape[-1]
    lam = lambda_V(p.with_dimension(d))
    if lam == 0.0:
        out = np.zeros(vv.shape[:-1] + (d, d))
        return out[0] if single else out
    coarse = _diffusion_tensor_raw(vv, lam, beta, n_radial, n_angular)
    fine = _diffusion_tensor_raw(vv, lam, beta, 2 * n_radial, 2 * n_angular)
    err = np.max(np.abs(fine - coarse))
    if err > rtol * max(np.max(np.abs(fine)), 1e-300):
        raise QuadratureError(f"diffusion tensor quadrature unresolved (change {err:.3e})")
    fine = 0.5 * (fine + np.swapaxes(fine, -1, -2))
    return fine[0] if single else fine


def inverse_speed_moment(d: int, beta: float = 1.0) -> float:
    """int M(u)/|u| du."""
    return sphere_area(d) * (beta / (2 * math.pi)) ** (d / 2) * 0.5 * (2 / beta) ** ((d - 1) / 2) * math.gamma((d - 1) / 2)


# ------------------------------------------------------------------ screening


def _maxwellian_1d_derivative(u, beta):
    return -beta * u * math.sqrt(beta / (2 * math.pi)) * np.exp(-0.5 * beta * u * u)


def _susceptibility_quad(x: float, beta: float) -> complex:
    """PV int M1'(u)/(x-u) du + i pi M1'(x) with scipy's Cauchy-weighted rule."""
    half = abs(x) + 14.0 / math.sqrt(beta)
    pv, _ = integrate.quad(lambda u: _maxwellian_1d_derivative(u, beta), -half, half,
                           weight="cauchy", wvar=x, epsabs=1e-13, epsrel=1e-12, limit=400)
    # quad returns PV int f(u)/(u-x); the kernel here is 1/(x-u)
    return complex(-pv, math.pi * float(_maxwellian_1d_derivative(x, beta)))


def susceptibility_contour(x: float, beta: float, eta: float = 0.5, n: int = 4000) -> complex:
    """int M1'(u)/(x-u-i0) du along the line u = s + i eta.

    The pole sits at u = x - i0, below the real axis, so any upward shift
    (eta > 0) leaves the value unchanged.
    """
    half = abs(x) + 14.0 / math.sqrt(beta) + 4 * eta
    s, w = gauss_legendre(n, -half, half)
    u = s + 1j * eta
    f = -beta * u * math.sqrt(beta / (2 * math.pi)) * np.exp(-0.5 * beta * u * u) / (x - u)
    return complex(np.sum(w * f))


def susceptibility_closed_form(x, beta: float):
    """beta (1 - 2 y F(y)) - i pi beta x M1(x) with y = x sqrt(beta/2), F = Dawson."""
    x = np.asarray(x, dtype=float)
    y = x * math.sqrt(beta / 2)
    real = beta * (1 - 2 * y * special.dawsn(y))
    imag = math.pi * _maxwellian_1d_derivative(x, beta)
    return real + 1j * imag


def dispersion_function(k, z: float, p: Potential, beta: float = 1.0, method: str = "quad") -> complex:
    """eps(k, z) = 1 + Vhat(|k|) int k.grad M(v*)/(z - k.v* - i0) dv*.

    After reduction along khat the integral is the one-dimensional
    susceptibility at x = z/|k|.
    """
    k = np.asarray(k, dtype=float)
    kn = float(np.linalg.norm(k))
    if kn == 0.0:
        raise ValueError("dispersion function is singular at k = 0")
    amp = float(p(kn))
    if amp == 0.0:
        return 1.0 + 0.0j
    x = z / kn
    if method == "quad":
        chi = _susceptibility_quad(x, beta)
    elif method == "contour":
        chi = susceptibility_contour(x, beta)
    elif method == "closed":
        chi = complex(susceptibility_closed_form(x, beta))
    else:
        raise ValueError(f"unknown method {method!r}")
    return 1.0 + amp * chi


def lenard_balescu_kernel(v, w, p: Potential, beta: float = 1.0, delta: float = 0.1, levels: int = 3,
                          screen: Potential | None = None, **quad) -> CollisionTensor:
    """delta-regularised int (k x k) pi Vhat^2 delta(k.w) / |eps(k, k.v)|^2 dk/(2pi)^d.

    ``screen`` is the profile used inside eps (defaults to ``p``); passing a zero
    potential removes screening.
    """
    v = np.asarray(v, dtype=float)
    w = np.asarray(w, dtype=float)
    if np.linalg.norm(w) == 0.0:
        raise ValueError("kernel is singular at w = 0")
    scr = p if screen is None else screen

    def weight(k):
        kn = np.linalg.norm(k, axis=1)
        safe = np.where(kn > 0, kn, 1.0)
        chi = susceptibility_closed_form((k @ v) / safe, beta)
        eps = 1.0 + scr(kn) * chi
        return 1.0 / np.abs(eps) ** 2

    widths = [delta / 2 ** j for j in range(levels)]
    table = [[_regularized_kernel(w, p, dl, weight=weight, **quad)] for dl in widths]
    for j in range(1, levels):
        for col in range(1, j + 1):
            fac = 4.0 ** col
            table[j].append((fac * table[j][col - 1] - table[j - 1][col - 1]) / (fac - 1))
    return CollisionTensor(table[-1][-1], w, {"widths": widths})
