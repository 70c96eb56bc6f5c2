"""Velocity-space operators on periodic spectral grids.

Transport-diffusion semigroups e^{-t(ik.v - sigma Lap)}, their resolvents,
the creation/annihilation pair at one background particle, the hat operator,
contour-deformed velocity averages and complex Airy resolvent norms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np
from numpy.polynomial.chebyshev import Chebyshev
from numpy.polynomial.legendre import leggauss
from scipy import linalg
from scipy.sparse.linalg import LinearOperator, gmres

from .landau import Potential, gauss_legendre

LOG_CUTOFF = -math.log(1e-14)


class ConvergenceError(RuntimeError):
    pass


# --------------------------------------------------------------------- grids


@dataclass(frozen=True)
class VelocityGrid:
    """Periodic grid on [-v_max, v_max)^d with n_pts points per axis."""
    d: int
    n_pts: int
    v_max: float
    beta: float = 1.0

    def __post_init__(self):
        if self.n_pts % 2:
            raise ValueError("n_pts must be even")
        if self.v_max < 6.0 / math.sqrt(self.beta) - 1e-12:
            raise ValueError(f"v_max={self.v_max} below 6/sqrt(beta): Maxwellian wrap-around too large")

    @property
    def h(self) -> float:
        return 2.0 * self.v_max / self.n_pts

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n_pts,) * self.d

    @property
    def size(self) -> int:
        return self.n_pts ** self.d

    @property
    def cell(self) -> float:
        return self.h ** self.d

    @property
    def axis(self) -> np.ndarray:
        return -self.v_max + self.h * np.arange(self.n_pts)

    @property
    def wavenumbers(self) -> np.ndarray:
        return 2 * math.pi * np.fft.fftfreq(self.n_pts, d=self.h)

    def mesh(self) -> list[np.ndarray]:
        return np.meshgrid(*([self.axis] * self.d), indexing="ij")

    def points(self) -> np.ndarray:
        return np.stack(self.mesh(), axis=-1)

    def freq_mesh(self) -> list[np.ndarray]:
        return np.meshgrid(*([self.wavenumbers] * self.d), indexing="ij")

    def deriv_mesh(self) -> list[np.ndarray]:
        """Wavenumbers for first derivatives with the Nyquist mode zeroed."""
        xi = self.wavenumbers.copy()
        xi[self.n_pts // 2] = 0.0
        return np.meshgrid(*([xi] * self.d), indexing="ij")

    def xi2(self) -> np.ndarray:
        return sum(x * x for x in self.freq_mesh())

    def k_dot_v(self, k) -> np.ndarray:
        k = np.asarray(k, dtype=float)
        return sum(kj * vj for kj, vj in zip(k, self.mesh()))

    def maxwellian(self) -> np.ndarray:
        v2 = sum(x * x for x in self.mesh())
        return (self.beta / (2 * math.pi)) ** (self.d / 2) * np.exp(-0.5 * self.beta * v2)

    def sqrt_maxwellian(self) -> np.ndarray:
        return np.sqrt(self.maxwellian())

    def inner(self, a, b) -> complex:
        return complex(self.cell * np.vdot(a, b))

    def norm(self, a) -> float:
        return float(math.sqrt(self.cell * np.vdot(a, a).real))

    def integrate(self, a):
        return self.cell * np.sum(a)

    def grad(self, f) -> np.ndarray:
        fh = np.fft.fftn(f)
        out = np.stack([np.fft.ifftn(1j * xi * fh) for xi in self.deriv_mesh()])
        return out if np.iscomplexobj(f) else out.real

    def directional(self, f, k) -> np.ndarray:
        """k . grad f (spectral)."""
        fh = np.fft.fftn(f)
        mult = sum(kj * xi for kj, xi in zip(np.asarray(k, dtype=float), self.deriv_mesh()))
        out = np.fft.ifftn(1j * mult * fh)
        return out if np.iscomplexobj(f) else out.real

    def div(self, flux) -> np.ndarray:
        total = sum(1j * xi * np.fft.fftn(fj) for xi, fj in zip(self.deriv_mesh(), flux))
        out = np.fft.ifftn(total)
        return out if np.iscomplexobj(flux) else out.real

    def laplacian(self, f) -> np.ndarray:
        out = np.fft.ifftn(-self.xi2() * np.fft.fftn(f))
        return out if np.iscomplexobj(f) else out.real

    def to_dict(self) -> dict:
        return {"d": self.d, "n_pts": self.n_pts, "v_max": self.v_max, "beta": self.beta}


def grid_for(d: int, n_pts: int, beta: float = 1.0, v_max: float | None = None) -> VelocityGrid:
    return VelocityGrid(d, n_pts, 6.0 / math.sqrt(beta) if v_max is None else v_max, beta)


@dataclass(frozen=True)
class GridField:
    grid: VelocityGrid
    values: np.ndarray
    k: np.ndarray | None = None

    def norm(self) -> float:
        return self.grid.norm(self.values)

    def inner(self, other: "GridField") -> complex:
        return self.grid.inner(self.values, other.values)

    def with_values(self, values) -> "GridField":
        return GridField(self.grid, values, self.k)


@dataclass(frozen=True)
class ResolventParams:
    omega: complex
    k: np.ndarray
    sigma: float
    n_gauss: int = 8
    rtol: float = 1e-9

    def __post_init__(self):
        if complex(self.omega).real <= 0:
            raise ValueError("Re omega must be positive")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")


# ---------------------------------------------------------------- semigroup


def _semigroup(f: np.ndarray, t: float, k: np.ndarray, sigma: float, grid: VelocityGrid,
               kv: np.ndarray | None = None, xi2: np.ndarray | None = None) -> np.ndarray:
    if t == 0.0:
        return np.array(f, dtype=complex)
    kv = grid.k_dot_v(k) if kv is None else kv
    xi2 = grid.xi2() if xi2 is None else xi2
    phase = np.exp(-0.5j * t * kv)
    out = np.fft.ifftn(np.fft.fftn(phase * f) * np.exp(-sigma * t * xi2))
    return phase * out * math.exp(-sigma * float(np.dot(k, k)) * t ** 3 / 12.0)


def semigroup_step(f: GridField, t: float, k, sigma: float) -> GridField:
    """e^{-t(ik.v - sigma Lap)} f via phase, heat convolution, phase and the
    commutator factor e^{-sigma |k|^2 t^3 / 12}."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    k = np.asarray(k, dtype=float)
    return GridField(f.grid, _semigroup(f.values, t, k, sigma, f.grid), k)


def _damping_horizon(re_omega: float, sigma: float, k2: float) -> float:
    """Smallest T with T Re(omega) + sigma k2 T^3/12 >= -log(1e-14)."""
    lo, hi = 0.0, LOG_CUTOFF / re_omega
    if sigma * k2 > 0:
        hi = min(hi, (12 * LOG_CUTOFF / (sigma * k2)) ** (1 / 3))
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if mid * re_omega + sigma * k2 * mid ** 3 / 12 >= LOG_CUTOFF:
            hi = mid
        else:
            lo = mid
    return hi


def time_ladder(horizon: float, rate: float, n_gauss: int = 8, t_first: float | None = None,
                refine: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Gauss nodes on [0, horizon]: geometric panels from t_first, split so no
    panel is longer than pi/rate (rate = fastest oscillation frequency)."""
    t_first = horizon * 1e-4 if t_first is None else t_first
    edges = [0.0]
    t = t_first
    while t < horizon:
        edges.append(t)
        t *= 2.0
    edges.append(horizon)
    max_width = math.pi / max(rate, 1e-300) if rate > 0 else horizon
    nodes, weights = [], []
    x, w = leggauss(n_gauss)
    for a, b in zip(edges[:-1], edges[1:]):
        pieces = max(1, math.ceil((b - a) / max_width)) * refine
        sub = np.linspace(a, b, pieces + 1)
        for p, q in zip(sub[:-1], sub[1:]):
            half = 0.5 * (q - p)
            nodes.append(p + half * (x + 1))
            weights.append(half * w)
    return np.concatenate(nodes), np.concatenate(weights)


def _green_sum(f: np.ndarray, omega: complex, k: np.ndarray, sigma: float, grid: VelocityGrid,
               nodes: np.ndarray, weights: np.ndarray) -> np.ndarray:
    kv = grid.k_dot_v(k)
    xi2 = grid.xi2()
    acc = np.zeros(grid.shape, dtype=complex)
    for t, w in zip(nodes, weights):
        acc += w * np.exp(-t * omega) * _semigroup(f, t, k, sigma, grid, kv, xi2)
    return acc


def _oscillation_rate(omega: complex, k: np.ndarray, grid: VelocityGrid) -> float:
    return abs(complex(omega).imag) + float(np.linalg.norm(k)) * grid.v_max * math.sqrt(grid.d) + 1.0


def resolvent_green(p: ResolventParams, f: GridField) -> GridField:
    """(omega + ik.v - sigma Lap)^{-1} f = int_0^inf e^{-t omega} S(t) f dt."""
    grid = f.grid
    k = np.asarray(p.k, dtype=float)
    horizon = _damping_horizon(complex(p.omega).real, p.sigma, float(k @ k))
    rate = _oscillation_rate(p.omega, k, grid)
    coarse_n, coarse_w = time_ladder(horizon, rate, p.n_gauss)
    fine_n, fine_w = time_ladder(horizon, rate, p.n_gauss, refine=2)
    coarse = _green_sum(f.values, p.omega, k, p.sigma, grid, coarse_n, coarse_w)
    fine = _green_sum(f.values, p.omega, k, p.sigma, grid, fine_n, fine_w)
    scale = max(grid.norm(fine), 1e-300)
    if grid.norm(fine - coarse) > p.rtol * scale:
        raise ConvergenceError(f"t-ladder refinement changed the result by {grid.norm(fine - coarse) / scale:.2e}")
    return GridField(grid, fine, k)


def _second_derivative_matrix(n: int, h: float) -> np.ndarray:
    xi = 2 * math.pi * np.fft.fftfreq(n, d=h)
    eye = np.eye(n)
    return np.real(np.fft.ifft(-(xi ** 2)[:, None] * np.fft.fft(eye, axis=0), axis=0))


def transport_diffusion_apply(u: np.ndarray, omega: complex, k: np.ndarray, sigma: float,
                              grid: VelocityGrid) -> np.ndarray:
    return omega * u + 1j * grid.k_dot_v(k) * u - sigma * grid.laplacian(u)


def resolvent_direct(p: ResolventParams, f: GridField, max_unknowns: int = 100_000) -> GridField:
    """Solve (omega + ik.v - sigma Lap) u = f on the grid by preconditioned GMRES.

    The preconditioner is the exact inverse of the Kronecker-sum operator
    (dense LU in 1-d, Bartels-Stewart in 2-d); the residual is measured with
    the FFT-based operator.
    """
    grid = f.grid
    if grid.size > max_unknowns:
        raise ValueError(f"{grid.size} unknowns exceed the direct-solve limit {max_unknowns}")
    k = np.asarray(p.k, dtype=float)
    n = grid.n_pts
    d2 = _second_derivative_matrix(n, grid.h)
    x = grid.axis
    one_d = [np.diag(1j * kj * x) - p.sigma * d2 for kj in k]
    one_d[0] = one_d[0] + p.omega * np.eye(n)
    if grid.d == 1:
        lu = linalg.lu_factor(one_d[0])
        precond = lambda r: linalg.lu_solve(lu, r.reshape(n)).reshape(-1)
    elif grid.d == 2:
        precond = lambda r: linalg.solve_sylvester(one_d[0], one_d[1].T, r.reshape(n, n)).reshape(-1)
    else:
        denom = p.omega + p.sigma * grid.xi2()
        precond = lambda r: np.fft.ifftn(np.fft.fftn(r.reshape(grid.shape)) / denom).reshape(-1)

    size = grid.size
    op = LinearOperator((size, size), dtype=complex,
                        matvec=lambda u: transport_diffusion_apply(u.reshape(grid.shape), p.omega, k, p.sigma, grid).reshape(-1))
    pre = LinearOperator((size, size), dtype=complex, matvec=precond)
    rhs = np.asarray(f.values, dtype=complex).reshape(-1)
    sol, info = gmres(op, rhs, M=pre, rtol=1e-13, atol=0.0, restart=50, maxiter=200)
    resid = np.linalg.norm(op.matvec(sol) - rhs)
    if info != 0 or resid > 1e-10 * np.linalg.norm(rhs):
        raise ConvergenceError(f"GMRES did not converge (info={info}, residual={resid:.2e})")
    return GridField(grid, sol.reshape(grid.shape), k)


# ------------------------------------------------------------ k quadrature


@dataclass(frozen=True)
class KQuadrature:
    """Nodes and weights for int (.) dk/(2pi)^d, symmetric under k -> -k."""
    nodes: np.ndarray
    weights: np.ndarray
    partner: np.ndarray  # index of -k

    def __len__(self) -> int:
        return len(self.weights)

    def half(self) -> np.ndarray:
        """Indices of one representative per {k, -k} pair."""
        return np.array([i for i in range(len(self)) if i < self.partner[i]], dtype=int)


def polar_k_quadrature(d: int, n_radial: int, n_angular: int, k_max: float) -> KQuadrature:
    r, wr = gauss_legendre(n_radial, 0.0, k_max)
    if d == 1:
        nodes = np.concatenate([r, -r])[:, None]
        weights = np.concatenate([wr, wr]) / (2 * math.pi)
        partner = np.concatenate([np.arange(n_radial) + n_radial, np.arange(n_radial)])
        return KQuadrature(nodes, weights, partner)
    if d == 2:
        if n_angular % 2:
            raise ValueError("n_angular must be even")
        th = 2 * math.pi * (np.arange(n_angular) + 0.5) / n_angular
        nodes = np.array([[ri * math.cos(t), ri * math.sin(t)] for ri in r for t in th])
        weights = np.array([wi * ri * 2 * math.pi / n_angular for ri, wi in zip(r, wr) for _ in th])
        weights /= (2 * math.pi) ** 2
        half = n_angular // 2
        partner = np.array([i * n_angular + (j + half) % n_angular for i in range(n_radial) for j in range(n_angular)])
        return KQuadrature(nodes, weights, partner)
    raise ValueError("polar k quadrature implemented for d = 1, 2")


# ------------------------------------------------- creation / annihilation


def _check_slot(j: int):
    if j != 0:
        raise ValueError("with one background particle the collision acts on slot 0 only")


def apply_S_minus(g: np.ndarray, k_nodes: np.ndarray, p: Potential, grid0: VelocityGrid,
                  grid1: VelocityGrid, j: int = 0) -> np.ndarray:
    """Create a background particle: h_k(v0, v1) = -sqrt M(v1) Vhat(k) k.grad_{v0} g(v0).

    Returns an array of shape (n_k, *grid0.shape, *grid1.shape).
    """
    _check_slot(j)
    sm = grid1.sqrt_maxwellian()
    out = []
    for k in np.atleast_2d(k_nodes):
        amp = float(p(np.linalg.norm(k)))
        dg = grid0.directional(np.asarray(g, dtype=complex), k)
        out.append(-amp * np.multiply.outer(dg, sm))
    return np.array(out)


def apply_S_plus(h: np.ndarray, k_nodes: np.ndarray, k_weights: np.ndarray, p: Potential,
                 grid0: VelocityGrid, grid1: VelocityGrid, j: int = 0) -> np.ndarray:
    """Annihilate: sum_k w_k Vhat(k) k.grad_{v0} int sqrt M(v1) h_k(v0, v1) dv1."""
    _check_slot(j)
    sm = grid1.sqrt_maxwellian()
    axes = tuple(range(grid0.d, grid0.d + grid1.d))
    acc = np.zeros(grid0.shape, dtype=complex)
    for hk, k, w in zip(h, np.atleast_2d(k_nodes), k_weights):
        amp = float(p(np.linalg.norm(k)))
        if amp == 0.0:
            continue
        avg = grid1.cell * np.tensordot(hk, sm, axes=(axes, tuple(range(grid1.d))))
        acc += w * amp * grid0.directional(avg, k)
    return acc


def two_slot_inner(a: np.ndarray, b: np.ndarray, k_weights: np.ndarray, grid0: VelocityGrid,
                   grid1: VelocityGrid) -> complex:
    """<a, b> = sum_k w_k int conj(a_k) b_k dv0 dv1."""
    total = 0j
    for ak, bk, w in zip(a, b, k_weights):
        total += w * np.vdot(ak, bk)
    return complex(total * grid0.cell * grid1.cell)


# ---------------------------------------------------------------- hat operator


def velocity_overlap(t, k_norm: float, sigma: float, d: int, beta: float = 1.0):
    """phi(t) = <sqrt M, e^{-t(ik.v - sigma Lap)} sqrt M> in closed form (continuum)."""
    t = np.asarray(t, dtype=float)
    a = 2.0 / beta + sigma * t
    b2 = ((2.0 * t / beta + sigma * t * t) * k_norm) ** 2
    c0 = t * t * k_norm ** 2 / beta + sigma * t ** 3 * k_norm ** 2 / 3.0
    pref = (beta / (2 * math.pi)) ** (d / 2) * (2.0 / beta) ** d
    return pref * (math.pi / a) ** (d / 2) * np.exp(b2 / (4 * a) - c0)


def hermite_overlap(t, k_norm: float, sigma: float, d: int, beta: float, basis: "HermiteBasis",
                    damping: "HermiteFilter | None" = None,
                    perp_basis: "HermiteBasis | None" = None):
    """phi(t) computed in a truncated Hermite-Galerkin representation of v1.

    The direction along k uses `basis` (optionally with the mode filter),
    the orthogonal directions use `perp_basis` with pure diffusion.
    """
    t = np.atleast_1d(np.asarray(t, dtype=float))
    perp_basis = basis if perp_basis is None else perp_basis
    gen_par = basis.generator(k_norm, sigma, damping)
    gen_perp = perp_basis.diffusion_generator(sigma)
    out = np.empty(len(t), dtype=complex)
    for idx, ti in enumerate(t):
        par = linalg.expm(-ti * gen_par)[0, 0]
        perp = linalg.expm(-ti * gen_perp)[0, 0] ** (d - 1) if d > 1 else 1.0
        out[idx] = par * perp
    return out


@lru_cache(maxsize=256)
def hermite_overlap_interpolant(k_norm: float, sigma: float, d: int, beta: float, basis: "HermiteBasis",
                                damping: "HermiteFilter | None", perp_basis: "HermiteBasis | None",
                                horizon: float, degree: int = 96):
    """Chebyshev interpolant of hermite_overlap on [0, horizon].

    Built from one matrix exponential per Chebyshev point, so repeated
    evaluations (one per Laplace frequency) stay cheap. The interpolation
    error is checked at interleaved points.
    """
    func = lambda t: hermite_overlap(t, k_norm, sigma, d, beta, basis, damping, perp_basis)
    re = Chebyshev.interpolate(lambda x: func(x).real, degree, domain=[0.0, horizon])
    im = Chebyshev.interpolate(lambda x: func(x).imag, degree, domain=[0.0, horizon])
    probe = horizon * (0.5 + 0.5 * np.cos(np.pi * (np.arange(7) + 0.37) / 7))
    err = np.max(np.abs(re(probe) + 1j * im(probe) - func(probe)))
    if err > 1e-11:
        raise ConvergenceError(f"overlap interpolant error {err:.1e} on [0, {horizon:.3g}]")
    return lambda x: re(x) + 1j * im(x)


@dataclass(frozen=True)
class HermiteFilter:
    """Damping |k| strength ((n - start)/(n_max - start))^power on modes n >= start.

    Without it the free-streaming coefficients reach the truncation edge
    and reflect, so the overlap recurs instead of decaying.
    """
    start: int = 9
    strength: float = 8.0
    power: int = 3

    def diagonal(self, n_modes: int) -> np.ndarray:
        n = np.arange(n_modes, dtype=float)
        top = max(n_modes - 1 - self.start, 1)
        ramp = np.clip((n - self.start) / top, 0.0, None)
        return self.strength * ramp ** self.power


@dataclass(frozen=True)
class HermiteBasis:
    """Orthonormal Hermite functions psi_n along one axis, psi_0 = M_1^{1/2}."""
    n_modes: int
    beta: float = 1.0

    def position(self) -> np.ndarray:
        # x = s (a + a^dagger) with s^2 = 1/beta for the ground state M_1^{1/2}
        s = 1.0 / math.sqrt(self.beta)
        off = s * np.sqrt(np.arange(1, self.n_modes))
        return np.diag(off, 1) + np.diag(off, -1)

    def momentum_squared(self) -> np.ndarray:
        # p = -i d/dx; p^2 = -(beta/4)(a - a^dagger)^2 in this scaling
        n = self.n_modes
        c = self.beta / 4.0
        diag = c * (2 * np.arange(n) + 1)
        off2 = -c * np.sqrt(np.arange(1, n - 1) * np.arange(2, n))
        return np.diag(diag) + np.diag(off2, 2) + np.diag(off2, -2)

    def generator(self, k_norm: float, sigma: float, damping: HermiteFilter | None = None) -> np.ndarray:
        """Galerkin matrix of i|k| x + sigma p^2 (+ |k| times the filter diagonal).

        Complex symmetric, so row 0 of exp(-t G) equals its column 0.
        """
        gen = 1j * k_norm * self.position() + sigma * self.momentum_squared()
        if damping is not None:
            gen = gen + k_norm * np.diag(damping.diagonal(self.n_modes))
        return gen

    def diffusion_generator(self, sigma: float) -> np.ndarray:
        return sigma * self.momentum_squared()

    def evaluate(self, x) -> np.ndarray:
        """Values psi_n(x) for n < n_modes, shape (n_modes, len(x))."""
        x = np.asarray(x, dtype=float)
        s = 1.0 / math.sqrt(self.beta)
        y = x / (s * math.sqrt(2.0))
        out = np.empty((self.n_modes,) + x.shape)
        out[0] = (2 * math.pi * s * s) ** -0.25 * np.exp(-0.25 * x * x / (s * s))
        if self.n_modes > 1:
            out[1] = math.sqrt(2.0) * y * out[0]
        for n in range(2, self.n_modes):
            out[n] = (math.sqrt(2.0 / n) * y * out[n - 1] - math.sqrt((n - 1) / n) * out[n - 2])
        return out


def _hat_time_nodes(k_norm: float, omega: complex, sigma: float, beta: float, n_min: int = 48):
    """Gauss nodes covering the support of phi(t) e^{-t omega}."""
    horizon = math.sqrt(2 * beta * 40.0) / max(k_norm, 1e-12)
    horizon = min(horizon, _damping_horizon(complex(omega).real, sigma, k_norm ** 2))
    cycles = abs(complex(omega).imag) * horizon / (2 * math.pi)
    n = max(n_min, int(8 * cycles) + n_min)
    return gauss_legendre(n, 0.0, horizon)


def sheared_axis_factors(grid: VelocityGrid, k: np.ndarray, t: np.ndarray, sigma: float):
    """Per-axis pieces of S_{-k}(t) f = e^{itk.v} F^{-1}[e^{-sigma int_0^t |xi + sk|^2 ds} F f].

    Returns (phase, damping, scalar): phase[j] and damping[j] have shape
    (len(t), n_pts) for axis j, scalar holds e^{-sigma |k|^2 t^3/3}. The
    wavenumbers have the Nyquist mode zeroed, matching grid.directional.
    """
    t = np.asarray(t, dtype=float)
    xi = grid.wavenumbers.copy()
    xi[grid.n_pts // 2] = 0.0
    x = grid.axis
    phase = [np.exp(1j * np.outer(t * kj, x)) for kj in k]
    damping = [np.exp(-sigma * (np.outer(t, xi * xi) + np.outer(t * t * kj, xi))) for kj in k]
    scalar = np.exp(-sigma * float(k @ k) * t ** 3 / 3.0)
    return phase, damping, scalar


def outer_axes(factors: Sequence[np.ndarray]) -> np.ndarray:
    """Batched tensor product: list of (R, n) arrays -> (R, n, ..., n)."""
    out = factors[0]
    for f in factors[1:]:
        out = out[..., None] * f.reshape((f.shape[0],) + (1,) * (out.ndim - 1) + (f.shape[1],))
    return out


@dataclass
class HatOperator:
    """Box = S^+ (omega + i k.(v1 - v0) + sigma(D_0 + D_1))^{-1} S^- acting on v0 fields.

    The v1 dependence enters only through phi_k(t) = <sqrt M, S_k(t) sqrt M>
    because the source and the projection in v1 are both sqrt M.
    transport="split" applies S_{-k}(t) as half phase, heat, half phase;
    "sheared" applies the heat in the co-moving frequency (one inverse FFT
    per time node). Both are exact in the continuum.
    """
    grid: VelocityGrid
    potential: Potential
    kquad: KQuadrature
    omega: complex
    sigma: float
    overlap: str = "exact"  # or "hermite"
    hermite_modes: int = 64
    hermite_damping: HermiteFilter | None = None
    hermite_perp_modes: int | None = None  # even modes kept across k; default: same basis
    transport: str = "split"
    _plan: list = field(default_factory=list, init=False, repr=False)

    def __post_init__(self):
        if complex(self.omega).real <= 0:
            raise ValueError("Re omega must be positive")
        if self.overlap not in ("exact", "hermite"):
            raise ValueError(f"unknown overlap {self.overlap!r}")
        if self.transport not in ("split", "sheared"):
            raise ValueError(f"unknown transport {self.transport!r}")
        grid = self.grid
        xi2 = grid.xi2()
        basis = HermiteBasis(self.hermite_modes, grid.beta) if self.overlap == "hermite" else None
        perp = None if self.hermite_perp_modes is None else HermiteBasis(2 * self.hermite_perp_modes, grid.beta)
        for k, w in zip(self.kquad.nodes, self.kquad.weights):
            kn = float(np.linalg.norm(k))
            amp = float(self.potential(kn))
            if amp == 0.0 or kn == 0.0:
                continue
            tn, tw = _hat_time_nodes(kn, self.omega, self.sigma, grid.beta)
            if basis is None:
                phi = velocity_overlap(tn, kn, self.sigma, grid.d, grid.beta)
            else:
                interp = hermite_overlap_interpolant(kn, self.sigma, grid.d, grid.beta, basis,
                                                     self.hermite_damping, perp, float(tn[-1] + tn[0]))
                phi = interp(tn)
            coeff = tw * np.exp(-tn * self.omega) * phi
            keep = np.abs(coeff) > 1e-18 * np.max(np.abs(coeff))
            if self.transport == "sheared":
                phase, damping, scalar = sheared_axis_factors(grid, k, tn[keep], self.sigma)
                self._plan.append((k, w * amp * amp, coeff[keep] * scalar, phase, damping))
                continue
            kv = grid.k_dot_v(-k)
            phases = np.exp(-0.5j * np.outer(tn[keep], kv.reshape(-1))).reshape((-1,) + grid.shape)
            heat = np.exp(-self.sigma * np.multiply.outer(tn[keep], xi2))
            comm = np.exp(-self.sigma * kn * kn * tn[keep] ** 3 / 12.0)
            self._plan.append((k, w * amp * amp, coeff[keep] * comm, phases, heat))

    def transport_average(self, f: np.ndarray, idx: int) -> np.ndarray:
        """T_k f = int e^{-t omega} phi_k(t) S_{-k}(t) f dt for plan entry idx."""
        _, _, coeff, phases, heat = self._plan[idx]
        axes = tuple(range(1, self.grid.d + 1))
        if self.transport == "sheared":
            fh = np.fft.fftn(f)
            out = np.fft.ifftn(outer_axes(heat) * fh, axes=axes) * outer_axes(phases)
            return np.tensordot(coeff, out, axes=(0, 0))
        inner = np.fft.fftn(phases * f, axes=axes) * heat
        out = phases * np.fft.ifftn(inner, axes=axes)
        return np.tensordot(coeff, out, axes=(0, 0))

    def apply(self, g: np.ndarray) -> np.ndarray:
        grid = self.grid
        acc = np.zeros(grid.shape, dtype=complex)
        for idx, (k, wv, *_rest) in enumerate(self._plan):
            f = grid.directional(np.asarray(g, dtype=complex), k)
            acc -= wv * grid.directional(self.transport_average(f, idx), k)
        return acc

    def quadratic_form(self, g: np.ndarray) -> complex:
        return self.grid.inner(g, self.apply(g))


def hat_apply(alpha: float, t_N: float, kappa: float, N: float, g: GridField, p: Potential,
              kquad: KQuadrature | None = None) -> GridField:
    """Box g with omega = (1 + i alpha)/t_N and sigma = kappa/N."""
    if kappa <= 0 or N < 1:
        raise ValueError("need kappa > 0 and N >= 1")
    kquad = polar_k_quadrature(g.grid.d, p.n_radial, p.n_angular, p.k_max) if kquad is None else kquad
    op = HatOperator(g.grid, p, kquad, (1 + 1j * alpha) / t_N, kappa / N)
    return g.with_values(op.apply(g.values))


def hat_apply_two_slot(alpha: float, t_N: float, kappa: float, N: float, g: np.ndarray, p: Potential,
                       kquad: KQuadrature, grid0: VelocityGrid, grid1: VelocityGrid,
                       n_gauss: int = 8) -> np.ndarray:
    """Reference evaluation on an explicit (v0, v1) grid: S^-, two-slot Green resolvent, S^+."""
    omega = (1 + 1j * alpha) / t_N
    sigma = kappa / N
    h = apply_S_minus(g, kquad.nodes, p, grid0, grid1)
    out = np.empty_like(h)
    xi2_0, xi2_1 = grid0.xi2(), grid1.xi2()
    for idx, k in enumerate(kquad.nodes):
        kn2 = float(k @ k)
        horizon = min(_damping_horizon(omega.real, sigma, 2 * kn2), math.sqrt(2 * grid1.beta * 40.0) / math.sqrt(kn2) * 3)
        rate = abs(omega.imag) + math.sqrt(kn2) * (grid0.v_max + grid1.v_max) * math.sqrt(grid0.d) + 1.0
        tn, tw = time_ladder(horizon, rate, n_gauss)
        kv0, kv1 = grid0.k_dot_v(-k), grid1.k_dot_v(k)
        acc = np.zeros_like(h[idx])
        for t, w in zip(tn, tw):
            step = _semigroup_two_slot(h[idx], t, kv0, kv1, xi2_0, xi2_1, sigma, kn2, grid0.d)
            acc += w * np.exp(-t * omega) * step
        out[idx] = acc
    return apply_S_plus(out, kquad.nodes, kquad.weights, p, grid0, grid1)


def _semigroup_two_slot(h, t, kv0, kv1, xi2_0, xi2_1, sigma, kn2, d):
    phase = np.exp(-0.5j * t * np.add.outer(kv0, kv1))
    heat = np.exp(-sigma * t * np.add.outer(xi2_0, xi2_1))
    out = phase * np.fft.ifftn(np.fft.fftn(phase * h) * heat)
    # one commutator factor per slot
    return out * math.exp(-2 * sigma * kn2 * t ** 3 / 12.0)


# ------------------------------------------------ contour deformation identity


def velocity_average_closed_form(k, omega: complex, sigma: float, beta: float = 1.0, shift: bool = False) -> complex:
    """int_0^inf e^{-t omega} Mhat(tk) e^{-sigma |k|^2 t^3/3} dt (both sides of the identity)."""
    k = np.asarray(k, dtype=float)
    kn = float(np.linalg.norm(k))
    horizon = min(math.sqrt(2 * beta * 40.0) / kn, _damping_horizon(complex(omega).real, sigma, kn * kn))
    cycles = abs(complex(omega).imag) * horizon / (2 * math.pi)
    tn, tw = gauss_legendre(max(200, int(20 * cycles)), 0.0, horizon)
    vals = np.exp(-tn * omega - 0.5 * tn * tn * kn * kn / beta - sigma * kn * kn * tn ** 3 / 3.0)
    return complex(np.sum(tw * vals))


def _average_grid_points(kn: float, re_omega: float, sigma: float, beta: float) -> int:
    """Points per axis on [-10/sqrt(beta), 10/sqrt(beta)) so that the sampled
    transform at t k does not alias while e^{-t omega - sigma k^2 t^3/3} > e^{-28}."""
    horizon = _damping_horizon(re_omega, sigma, kn * kn)
    if sigma > 0:
        horizon = min(horizon, (84.0 / (sigma * kn * kn)) ** (1 / 3))
    h = 2 * math.pi / (kn * horizon + 14.0 * math.sqrt(beta))
    return max(64, 2 * math.ceil(10.0 / math.sqrt(beta) / h))


def deformed_velocity_average(k, t_N: float, kappa: float, N: float, beta: float = 1.0,
                              grid: VelocityGrid | None = None, n_gauss: int = 8) -> tuple[complex, complex]:
    """(direct, deformed) evaluations of int (1/t_N + ik.v - (kappa/N) Lap)^{-1} M dv.

    The deformed side shifts v -> v - i khat: the integrand becomes the
    complex Maxwellian M(v - i khat) and |k| is added to the damping.
    """
    k = np.asarray(k, dtype=float)
    kn = float(np.linalg.norm(k))
    if kn == 0.0:
        raise ValueError("k must be nonzero")
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    d = len(k)
    sigma = kappa / N
    if grid is None:
        grid = grid_for(d, _average_grid_points(kn, 1.0 / t_N, sigma, beta), beta, v_max=10.0 / math.sqrt(beta))
    m = grid.maxwellian()
    khat = k / kn
    v2_shift = sum((vj - 1j * kh) ** 2 for vj, kh in zip(grid.mesh(), khat))
    m_shift = (beta / (2 * math.pi)) ** (d / 2) * np.exp(-0.5 * beta * v2_shift)
    direct = resolvent_green(ResolventParams(1.0 / t_N, k, sigma, n_gauss), GridField(grid, m))
    deformed = resolvent_green(ResolventParams(1.0 / t_N + kn, k, sigma, n_gauss), GridField(grid, m_shift))
    return complex(grid.integrate(direct.values)), complex(grid.integrate(deformed.values))


# ------------------------------------------------------------------- Airy


def _power_iteration_inverse_norm(matrix: np.ndarray, tol: float = 1e-6, max_iter: int = 5000,
                                  seed: int = 0) -> float:
    """||A^{-1}|| by power iteration on (A^{-1})^* A^{-1}."""
    lu = linalg.lu_factor(matrix)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(matrix.shape[0]) + 1j * rng.standard_normal(matrix.shape[0])
    x /= np.linalg.norm(x)
    prev = 0.0
    for _ in range(max_iter):
        y = linalg.lu_solve(lu, x)
        z = linalg.lu_solve(lu, y, trans=2)
        lam = float(np.linalg.norm(z))
        x = z / lam
        if abs(lam - prev) <= tol * lam:
            return math.sqrt(lam)
        prev = lam
    raise ConvergenceError("power iteration did not converge")


def _airy_matrix(eta: float, slope: float, diffusion: float, half_width: float, n: int) -> np.ndarray:
    """eta + i slope x - diffusion d^2/dx^2 on a periodic spectral grid of [-L, L)."""
    h = 2 * half_width / n
    x = -half_width + h * np.arange(n)
    return eta * np.eye(n) + np.diag(1j * slope * x) - diffusion * _second_derivative_matrix(n, h)


def airy_resolvent_norm(eta: float, half_width: float = 20.0, n_pts: int = 256, tol: float = 1e-6) -> float:
    """||(eta + i z - d^2/dz^2)^{-1}|| on L^2(R), truncated to [-L, L)."""
    if eta < 0:
        raise ValueError("eta must be nonnegative")
    return _power_iteration_inverse_norm(_airy_matrix(eta, 1.0, 1.0, half_width, n_pts), tol)


def transport_diffusion_norm(eps: float, k_norm: float, sigma: float, n_pts: int = 256,
                             width_scales: float = 20.0, tol: float = 1e-6,
                             half_width: float | None = None, points_per_length: float = 3.0) -> float:
    """||(eps + i|k|x - sigma d^2/dx^2)^{-1}|| in physical variables.

    The perpendicular directions only add a nonnegative self-adjoint part that
    commutes with the rest, so the supremum is attained on the 1-d problem.
    By default the domain spans width_scales Airy lengths (sigma/|k|)^{1/3}
    with n_pts points.  With half_width the domain is the fixed velocity window
    [-half_width, half_width) and the grid is refined to points_per_length
    points per Airy length.
    """
    length = (sigma / k_norm) ** (1 / 3)
    if half_width is None:
        return _power_iteration_inverse_norm(
            _airy_matrix(eps, k_norm, sigma, width_scales * length, n_pts), tol)
    if half_width < 5 * length:
        raise ValueError("velocity window narrower than five Airy lengths")
    n = max(n_pts, 2 * math.ceil(half_width * points_per_length / length))
    return _power_iteration_inverse_norm(_airy_matrix(eps, k_norm, sigma, half_width, n), tol)


@dataclass(frozen=True)
class AiryFit:
    exponent_N: float
    exponent_k: float
    stderr_N: float
    stderr_k: float
    residual: float
    table: list = field(default_factory=list)


def airy_scaling_fit(N_list: Sequence[float], k_list: Sequence[float], kappa: float = 1.0, d: int = 2,
                     eps: float = 0.0, n_pts: int = 256, max_residual: float = 1e-2,
                     half_width: float | None = 6.0) -> AiryFit:
    """Least-squares fit log norm = c + a log N + b log|k| over the product grid.

    Norms are computed on the fixed velocity window [-half_width, half_width);
    half_width=None rescales the window with the Airy length instead, which
    makes the exponents exact by construction at eps = 0.
    """
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    N_arr = np.asarray(N_list, dtype=float)
    k_arr = np.asarray(k_list, dtype=float)
    if N_arr.max() / N_arr.min() < 100 and k_arr.max() / k_arr.min() < 100:
        raise ValueError("lists must span at least two decades in total")
    rows = []
    for N in N_arr:
        for kn in k_arr:
            rows.append((float(N), float(kn), transport_diffusion_norm(eps, kn, kappa / N, n_pts,
                                                                     half_width=half_width)))
    data = np.array(rows)
    design = np.column_stack([np.ones(len(data)), np.log(data[:, 0]), np.log(data[:, 1])])
    coef, *_ = np.linalg.lstsq(design, np.log(data[:, 2]), rcond=None)
    resid = np.log(data[:, 2]) - design @ coef
    dof = max(len(data) - 3, 1)
    s2 = float(resid @ resid) / dof
    cov = s2 * np.linalg.inv(design.T @ design)
    rms = float(np.sqrt(np.mean(resid ** 2)))
    if rms > max_residual:
        raise ConvergenceError(f"fit residual {rms:.3e} above threshold")
    return AiryFit(float(coef[1]), float(coef[2]), float(math.sqrt(cov[1, 1])), float(math.sqrt(cov[2, 2])),
                   rms, [tuple(r) for r in rows])
