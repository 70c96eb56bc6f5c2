"""Tagged-particle hierarchy with one background particle, simulated in time.

Also here: the Laplace-domain ansatz for the same system, the limiting
Fokker-Planck flow, and the sweep over N comparing the two.

State layout at one background particle. g0 lives on the v0 grid. g1 is
stored only at one representative k of each {k, -k} pair of the polar
k-quadrature. For real g0 the partner satisfies g1(-k) = conj g1(k), so
the doubled weight accounts for it. Along v1, g1 is expanded in Hermite
functions. The direction along k carries a mode filter. The orthogonal
direction keeps only even modes, because the source sqrt(M) is even there
and pure diffusion never excites odd modes.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from functools import lru_cache

import numpy as np
import scipy.fft as sfft
from numpy.polynomial.legendre import leggauss
from scipy import linalg
from scipy.sparse.linalg import LinearOperator, gmres

from .landau import diffusion_tensor, gaussian_potential
from .spectral_ops import (
    ConvergenceError,
    GridField,
    HatOperator,
    HermiteBasis,
    HermiteFilter,
    VelocityGrid,
    hermite_overlap_interpolant,
    outer_axes,
    polar_k_quadrature,
)


class StabilityError(RuntimeError):
    """Energy grew by more than the per-step tolerance."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


class LaplaceWindowError(RuntimeError):
    pass


class StudyAborted(RuntimeError):
    """A sub-run of a sweep failed; `partial` holds the rows finished so far."""

    def __init__(self, message: str, partial: list):
        super().__init__(message)
        self.partial = partial


# ------------------------------------------------------------------- config


@dataclass(frozen=True)
class HierarchyConfig:
    d: int = 2
    beta: float = 1.0
    N: float = 100.0
    t_N: float | None = None  # None: t_N = N
    kappa: float = 1.0
    m0: int = 1
    experimental: bool = False
    tau_max: float = 1.0
    # initial density exp(-|v - v_star|^2 / width^2)
    v_star: tuple[float, ...] = (1.0, 0.0)
    width: float = 1.0
    amplitude: float = 1.0  # Vhat amplitude; 0 switches the coupling off
    n_v: int = 32
    v_max: float = 6.0
    k_radial: int = 8
    k_angular: int = 16
    k_max: float = 4.5
    hermite_parallel: int = 48
    hermite_perp: int = 3
    filter_start: int = 9
    filter_strength: float = 8.0
    filter_power: int = 3
    dtau: float = 0.02
    first_step: float | None = None  # None: 0.1 / (t_N k_max v_max sqrt(d))
    growth: float = 0.3  # early steps obey dtau_n <= growth * tau_n
    collocation: int = 3
    quad_extra: int = 12
    krylov_tol: float = 1e-11
    energy_tol: float = 1e-9
    alpha_step: float = 1.0
    alpha_max: float = 100.0
    laplace_tail_tol: float = 1e-4
    workers: int = 1
    lattice_points: int = 8  # experimental lattice solver: k-lattice half width

    def __post_init__(self):
        if self.d not in (1, 2):
            raise ValueError("hierarchy simulation supports d = 1, 2")
        if len(self.v_star) != self.d:
            object.__setattr__(self, "v_star", tuple(self.v_star[: self.d]) + (0.0,) * max(0, self.d - len(self.v_star)))
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if self.kappa < 0:
            raise ValueError("kappa must be nonnegative")
        if self.m0 != 1 and not (self.m0 == 2 and self.experimental):
            raise ValueError("only m0 = 1 is supported (m0 = 2 behind experimental=True)")
        if self.tau_max <= 0 or self.dtau <= 0:
            raise ValueError("tau_max and dtau must be positive")
        if self.collocation < 1:
            raise ValueError("collocation needs at least one node")

    @property
    def time_scale(self) -> float:
        return float(self.N if self.t_N is None else self.t_N)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["v_star"] = list(self.v_star)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "HierarchyConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown hierarchy keys: {sorted(unknown)}")
        data = dict(data)
        if "v_star" in data:
            data["v_star"] = tuple(float(x) for x in data["v_star"])
        return cls(**data)


def initial_density(grid: VelocityGrid, v_star, width: float = 1.0) -> np.ndarray:
    """sqrt(M) times exp(-|v - v_star|^2 / width^2)."""
    r2 = sum((x - c) ** 2 for x, c in zip(grid.mesh(), v_star))
    return grid.sqrt_maxwellian() * np.exp(-r2 / width ** 2)


def _deriv_axis(grid: VelocityGrid) -> np.ndarray:
    xi = grid.wavenumbers.copy()
    xi[grid.n_pts // 2] = 0.0
    return xi


def _deriv_xi2(grid: VelocityGrid) -> np.ndarray:
    return sum(x * x for x in grid.deriv_mesh())


def _fftn(a, d):
    return sfft.fftn(a, axes=tuple(range(a.ndim - d, a.ndim)))


def _ifftn(a, d):
    return sfft.ifftn(a, axes=tuple(range(a.ndim - d, a.ndim)))


# ------------------------------------------------------- diffusion tensors


def landau_tensor_on_grid(grid: VelocityGrid, potential) -> np.ndarray:
    """A0 at every grid point, shape (*grid.shape, d, d)."""
    pts = grid.points().reshape(-1, grid.d)
    return diffusion_tensor(pts, potential.with_dimension(grid.d), grid.beta).reshape(grid.shape + (grid.d, grid.d))


def discrete_tensor_on_grid(grid: VelocityGrid, kquad, potential) -> np.ndarray:
    """pi sum_k w Vhat^2 (k x k) M_1(khat.v)/|k|: the diffusion tensor the
    discrete hierarchy converges to as N grows with the k-quadrature fixed."""
    pts = grid.points()
    beta = grid.beta
    out = np.zeros(grid.shape + (grid.d, grid.d))
    for k, w in zip(kquad.nodes, kquad.weights):
        kn = float(np.linalg.norm(k))
        amp = float(potential(kn))
        if amp == 0.0 or kn == 0.0:
            continue
        u = pts @ (k / kn)
        m1 = math.sqrt(beta / (2 * math.pi)) * np.exp(-0.5 * beta * u * u)
        out += (math.pi * w * amp * amp / kn) * m1[..., None, None] * np.outer(k, k)
    return out


# ------------------------------------------------------------ Fokker-Planck


def _derivative_matrices(grid: VelocityGrid) -> list[np.ndarray]:
    n = grid.n_pts
    xi = _deriv_axis(grid)
    d1 = np.real(np.fft.ifft(1j * xi[:, None] * np.fft.fft(np.eye(n), axis=0), axis=0))
    eye = np.eye(n)
    mats = []
    for axis in range(grid.d):
        m = np.ones((1, 1))
        for j in range(grid.d):
            m = np.kron(m, d1 if j == axis else eye)
        mats.append(m)
    return mats


def fokker_planck_matrix(grid: VelocityGrid, kappa: float, tensor: np.ndarray | None) -> np.ndarray:
    """Dense symmetric matrix of g -> div((kappa Id + A) grad g).

    Built from antisymmetric spectral derivative matrices, so constants lie
    in the kernel of its transpose and mass is conserved exactly.
    """
    if grid.size > 6000:
        raise ValueError(f"{grid.size} unknowns too many for the dense Fokker-Planck operator")
    D = _derivative_matrices(grid)
    n = grid.size
    L = np.zeros((n, n))
    for i in range(grid.d):
        for j in range(grid.d):
            coef = np.full(n, kappa if i == j else 0.0)
            if tensor is not None:
                coef = coef + tensor[..., i, j].reshape(-1)
            if not coef.any():
                continue
            L += D[i] @ (coef[:, None] * D[j])
    return 0.5 * (L + L.T)


@dataclass
class FokkerPlanckRun:
    taus: np.ndarray
    values: np.ndarray  # (len(taus), *grid.shape)
    mass: np.ndarray
    norms: np.ndarray
    method: str

    @property
    def mass_drift(self) -> float:
        return float(np.max(np.abs(self.mass - self.mass[0])) / max(abs(self.mass[0]), 1e-300))

    @property
    def norm_monotone(self) -> bool:
        return bool(np.all(np.diff(self.norms) <= 1e-13 * self.norms[0]))


class FokkerPlanckFlow:
    """exp(tau L) and (s - L)^{-1} through one symmetric eigendecomposition."""

    def __init__(self, grid: VelocityGrid, kappa: float, tensor: np.ndarray | None):
        self.grid = grid
        self.matrix = fokker_planck_matrix(grid, kappa, tensor)
        self.eigvals, self.eigvecs = linalg.eigh(self.matrix)
        if self.eigvals.max() > 1e-8 * max(1.0, -self.eigvals.min()):
            raise ValueError("diffusion tensor is not positive semidefinite")
        self.eigvals = np.minimum(self.eigvals, 0.0)

    def coefficients(self, g0: np.ndarray) -> np.ndarray:
        return self.eigvecs.T @ np.asarray(g0, dtype=float).reshape(-1)

    def evolve(self, g0: np.ndarray, taus) -> np.ndarray:
        c = self.coefficients(g0)
        taus = np.atleast_1d(np.asarray(taus, dtype=float))
        out = (np.exp(np.outer(taus, self.eigvals)) * c) @ self.eigvecs.T
        return out.reshape((len(taus),) + self.grid.shape)

    def resolvent(self, g0: np.ndarray, s: complex) -> np.ndarray:
        c = self.coefficients(g0)
        return (self.eigvecs @ (c / (s - self.eigvals))).reshape(self.grid.shape)


def solve_fokker_planck(tensor: np.ndarray | None, kappa: float, initial, taus,
                        grid: VelocityGrid | None = None, method: str = "crank-nicolson",
                        dtau: float = 1e-3) -> FokkerPlanckRun:
    """d g/d tau = div((kappa Id + A) grad g) sampled at `taus`.

    method="crank-nicolson" (implicit midpoint, one LU per step size) or
    "exact" (eigendecomposition).
    """
    if isinstance(initial, GridField):
        grid, g0 = initial.grid, np.real(initial.values)
    else:
        if grid is None:
            raise ValueError("grid required when initial data is an array")
        g0 = np.asarray(initial, dtype=float)
    taus = np.asarray(taus, dtype=float)
    if taus.ndim != 1 or np.any(np.diff(taus) < 0) or taus[0] < 0:
        raise ValueError("taus must be nondecreasing and nonnegative")
    if tensor is not None:
        tensor = np.asarray(tensor, dtype=float)
        if tensor.shape != grid.shape + (grid.d, grid.d):
            raise ValueError("tensor must have shape (*grid.shape, d, d)")
    if method == "exact":
        values = FokkerPlanckFlow(grid, kappa, tensor).evolve(g0, taus)
    elif method == "crank-nicolson":
        L = fokker_planck_matrix(grid, kappa, tensor)
        eye = np.eye(grid.size)
        factors = {}
        cur = g0.reshape(-1).copy()
        t = 0.0
        values = []
        for target in taus:
            span = target - t
            if span > 0:
                steps = max(1, math.ceil(span / dtau - 1e-9))
                h = span / steps
                key = round(h, 15)
                if key not in factors:
                    factors[key] = (linalg.lu_factor(eye - 0.5 * h * L), eye + 0.5 * h * L)
                lu, rhs = factors[key]
                for _ in range(steps):
                    cur = linalg.lu_solve(lu, rhs @ cur)
                t = target
            values.append(cur.reshape(grid.shape).copy())
        values = np.array(values)
    else:
        raise ValueError(f"unknown method {method!r}")
    mass = np.array([grid.integrate(v) for v in values])
    norms = np.array([grid.norm(v) for v in values])
    return FokkerPlanckRun(taus, values, mass, norms, method)


# ------------------------------------------------------------- quadratures


@lru_cache(maxsize=512)
def _gauss(n: int):
    return leggauss(n)


def oscillatory_nodes(length: float, rate: float, extra: int = 12, max_nodes: int = 96):
    """Gauss-Legendre nodes on [0, length] for integrands oscillating at
    angular frequency <= rate times a smooth envelope."""
    if length <= 0:
        return np.zeros(0), np.zeros(0)
    need = 0.6 * rate * length
    panels = max(1, math.ceil((need + extra) / max_nodes))
    n = math.ceil(need / panels) + extra
    x, w = _gauss(n)
    edges = np.linspace(0.0, length, panels + 1)
    nodes = [(a + b) / 2 + (b - a) / 2 * x for a, b in zip(edges[:-1], edges[1:])]
    weights = [(b - a) / 2 * w for a, b in zip(edges[:-1], edges[1:])]
    return np.concatenate(nodes), np.concatenate(weights)


def collocation_tableau(s: int):
    """Gauss collocation on [0, 1]: nodes c, A_ij = int_0^{c_i} L_j, b_j = int_0^1 L_j."""
    x, _ = leggauss(s)
    c = 0.5 * (x + 1)
    A = np.zeros((s, s))
    b = np.zeros(s)
    for j in range(s):
        others = np.delete(c, j)
        poly = np.poly1d(np.poly(others) / np.prod(c[j] - others)) if s > 1 else np.poly1d([1.0])
        antider = poly.integ()
        b[j] = antider(1.0) - antider(0.0)
        A[:, j] = antider(c) - antider(0.0)
    return c, A, b


def lagrange_weights(nodes: np.ndarray, x: np.ndarray) -> np.ndarray:
    """ell_m(x_r) for the Lagrange basis through `nodes`; shape (len(x), len(nodes))."""
    x = np.asarray(x, dtype=float)
    out = np.ones((len(x), len(nodes)))
    for m, zm in enumerate(nodes):
        for j, zj in enumerate(nodes):
            if j != m:
                out[:, m] *= (x - zj) / (zm - zj)
    return out


# ------------------------------------------------------------ the hierarchy


@dataclass
class _Plan:
    """Everything a step of length dtau needs that does not depend on the state."""
    dtau: float
    u: np.ndarray
    z: np.ndarray
    inner: dict  # radial index -> (ages, weights, heat times, lagrange rows, group starts)
    source: dict  # radial index -> (ages, weights, lagrange rows, columns b(age))
    history: dict  # radial index -> rows b(t_N u_i), shape (s, modes)
    full: dict  # radial index -> (E_par(T), E_perp(T))
    heat_back: np.ndarray  # exp(+D0 u_j xi^2), shape (s, *grid.shape)
    heat_fwd: np.ndarray  # exp(-D0 (dtau - u_j) xi^2)
    heat_step: np.ndarray  # exp(-D0 dtau xi^2)
    precond: np.ndarray  # (I - lambda(xi) A)^{-1} per Fourier mode, shape (*grid.shape, s, s)


class HierarchyModel:
    """Discretisation of the one-background-particle hierarchy.

    Slow time tau, fast time t = t_N tau. In fast time g1 is transported by
    e^{-t(ik.(v1 - v0) - sigma(Lap0 + Lap1))}, sigma = kappa/N, and g0
    diffuses with kappa t_N/N in slow time.
    """

    def __init__(self, config: HierarchyConfig):
        c = config
        self.config = c
        self.grid = VelocityGrid(c.d, c.n_v, c.v_max, c.beta)
        self.potential = gaussian_potential(c.d, amplitude=c.amplitude)
        self.kquad = polar_k_quadrature(c.d, c.k_radial, c.k_angular, c.k_max)
        half = self.kquad.half()
        nodes = self.kquad.nodes[half]
        norms = np.linalg.norm(nodes, axis=1)
        amps = np.asarray(self.potential(norms), dtype=float)
        keep = amps > 0
        self.k = nodes[keep]
        self.k_norm = norms[keep]
        self.weight = 2.0 * self.kquad.weights[half][keep]
        self.amp = amps[keep]
        self.radii = np.unique(np.round(self.k_norm, 12))
        self.radial = np.searchsorted(self.radii, np.round(self.k_norm, 12))

        self.t_N = c.time_scale
        self.sigma = c.kappa / c.N
        self.d0 = c.kappa * self.t_N / c.N
        self.coupling = self.t_N / math.sqrt(c.N)

        g = self.grid
        self.xi = _deriv_axis(g)
        self.xi2 = _deriv_xi2(g)
        self.kxi = [sum(kj * x for kj, x in zip(k, g.deriv_mesh())) for k in self.k]

        self.par = HermiteBasis(c.hermite_parallel, c.beta)
        self.damping = HermiteFilter(c.filter_start, c.filter_strength, c.filter_power)
        self.n_perp = c.hermite_perp if c.d == 2 else 1
        self.perp_basis = HermiteBasis(2 * self.n_perp, c.beta) if c.d == 2 else None
        self.gen_par = [self.par.generator(kn, self.sigma, self.damping) for kn in self.radii]
        if c.d == 2:
            self.gen_perp = self.sigma * self.perp_basis.momentum_squared()[::2, ::2]
        else:
            self.gen_perp = np.zeros((1, 1))
        self.n_modes = c.hermite_parallel * self.n_perp
        # position operator spectrum bounds the oscillation of g1's Hermite coefficients
        self.x_max = float(np.max(np.abs(np.linalg.eigvalsh(self.par.position()))))
        self.v_rate = c.v_max * math.sqrt(c.d)
        self.horizon = np.sqrt(80.0 * c.beta) / self.radii

        self.colloc_c, self.colloc_A, self.colloc_b = collocation_tableau(c.collocation)
        if len(self.k):
            self.mean_tensor = self._mean_tensor()
        else:
            self.mean_tensor = np.zeros((c.d, c.d))
        self._plans: dict = {}

    # ---------------------------------------------------------- helpers

    def _mean_tensor(self) -> np.ndarray:
        A = discrete_tensor_on_grid(self.grid, self.kquad, self.potential)
        m = self.grid.maxwellian()
        return np.tensordot(m, A, axes=(tuple(range(self.grid.d)), tuple(range(self.grid.d)))) / m.sum()

    def initial_state(self) -> "HierarchyState":
        g0 = initial_density(self.grid, self.config.v_star, self.config.width)
        g1 = np.zeros((len(self.k), self.n_modes) + self.grid.shape, dtype=complex)
        return HierarchyState(GridField(self.grid, g0), g1, 0.0, self)

    def energy(self, g0: np.ndarray, g1: np.ndarray) -> float:
        e = self.grid.norm(g0) ** 2
        if len(self.k):
            per_k = np.sum(np.abs(g1.reshape(len(self.k), -1)) ** 2, axis=1) * self.grid.cell
            e += float(self.weight @ per_k)
        return e

    def _columns(self, r: int, ages: np.ndarray) -> np.ndarray:
        """b(t) = exp(-t G) e_0 for every age; shape (modes, len(ages))."""
        if len(ages) == 0:
            return np.zeros((self.n_modes, 0), dtype=complex)
        par = linalg.expm(-ages[:, None, None] * self.gen_par[r][None])[:, :, 0]
        perp = linalg.expm(-ages[:, None, None] * self.gen_perp[None])[:, :, 0]
        return np.einsum("ta,tb->abt", par, perp).reshape(self.n_modes, len(ages))

    def _overlap(self, r: int, ages: np.ndarray) -> np.ndarray:
        fn = hermite_overlap_interpolant(float(self.radii[r]), self.sigma, self.config.d, self.config.beta,
                                         self.par, self.damping, self.perp_basis, float(self.horizon[r]))
        return fn(ages)

    def plan(self, dtau: float) -> _Plan:
        key = float(dtau)
        if key in self._plans:
            return self._plans[key]
        c = self.config
        s = c.collocation
        u = dtau * self.colloc_c
        z = np.concatenate([[0.0], u])
        tN = self.t_N
        inner, source, history, full = {}, {}, {}, {}
        for r, kn in enumerate(self.radii):
            rate_in = kn * self.v_rate
            ages_l, w_l, heat_l, starts = [], [], [], []
            count = 0
            for i in range(s):
                span = min(tN * u[i], self.horizon[r])
                a, w = oscillatory_nodes(span, rate_in, c.quad_extra)
                starts.append(count)
                count += len(a)
                ages_l.append(a)
                w_l.append(w)
                heat_l.append(np.full(len(a), u[i]))
            ages = np.concatenate(ages_l)
            heat_t = np.concatenate(heat_l)
            weights = np.concatenate(w_l) * self._overlap(r, ages) / tN
            rows = lagrange_weights(z, heat_t - ages / tN)
            inner[r] = (ages, weights, heat_t, rows, np.array(starts))

            T = tN * dtau
            a, w = oscillatory_nodes(T, kn * (self.v_rate + self.x_max), c.quad_extra)
            rows = lagrange_weights(z, dtau - a / tN)
            source[r] = (a, w / tN, rows, self._columns(r, a))

            history[r] = self._columns(r, tN * u).T.copy()
            full[r] = (linalg.expm(-T * self.gen_par[r]), linalg.expm(-T * self.gen_perp))

        xi2 = self.xi2
        heat_back = np.exp(np.multiply.outer(self.d0 * u, xi2))
        heat_fwd = np.exp(-np.multiply.outer(self.d0 * (dtau - u), xi2))
        heat_step = np.exp(-self.d0 * dtau * xi2)

        # local-diffusion model of the in-step coupling for the Krylov preconditioner
        lam = -(tN / c.N) * sum(self.mean_tensor[i, j] * mi * mj
                                for i, mi in enumerate(self.grid.deriv_mesh())
                                for j, mj in enumerate(self.grid.deriv_mesh()))
        A = dtau * self.colloc_A
        eye = np.eye(s)
        precond = np.linalg.inv(eye - lam[..., None, None] * A)

        p = _Plan(dtau, u, z, inner, source, history, full, heat_back, heat_fwd, heat_step, precond)
        if len(self._plans) > 3:
            self._plans.pop(next(iter(self._plans)))
        self._plans[key] = p
        return p

    def _sheared(self, kidx: int, ages: np.ndarray, heat_t: np.ndarray, rows: np.ndarray,
                 zhat: np.ndarray) -> np.ndarray:
        """S_{-k}(a) k.grad g0(heat_t - a/t_N) for every node, from the interpolated stages.

        The g0 heat factor exp(-D0 (u - a/t_N) xi^2) merges with the transport
        damping, leaving exp(-D0 u xi^2 - sigma (a^2 k.xi + a^3 |k|^2/3)).
        """
        k = self.k[kidx]
        sig = self.sigma
        comb = (rows @ zhat.reshape(len(zhat), -1)).reshape((len(ages),) + self.grid.shape)
        damp = [np.exp(-self.d0 * np.outer(heat_t, self.xi ** 2) - sig * np.outer(ages * ages * kj, self.xi))
                for kj in k]
        scal = np.exp(-sig * float(k @ k) * ages ** 3 / 3.0)
        spec = outer_axes(damp) * (1j * self.kxi[kidx]) * comb
        field_ = _ifftn(spec, self.grid.d)
        phase = outer_axes([np.exp(1j * np.outer(ages * kj, self.grid.axis)) for kj in k])
        return field_ * phase * scal.reshape((-1,) + (1,) * self.grid.d)

    def _transport(self, kidx: int, fields_: np.ndarray, t: float) -> np.ndarray:
        """S_{-k}(t) applied to a stack of v0 fields."""
        k = self.k[kidx]
        sig = self.sigma
        d = self.grid.d
        damp = [np.exp(-sig * (t * self.xi ** 2 + t * t * kj * self.xi))[None] for kj in k]
        phase = [np.exp(1j * t * kj * self.grid.axis)[None] for kj in k]
        spec = _fftn(fields_, d) * outer_axes(damp)[0]
        return _ifftn(spec, d) * outer_axes(phase)[0] * math.exp(-sig * float(k @ k) * t ** 3 / 3.0)

    def _map_k(self, fn):
        idx = range(len(self.k))
        if self.config.workers > 1:
            with ThreadPoolExecutor(self.config.workers) as ex:
                return list(ex.map(fn, idx))
        return [fn(i) for i in idx]

    def _source_terms(self, plan: _Plan, zhat: np.ndarray, g1: np.ndarray | None) -> np.ndarray:
        """F_i: the g0 forcing at each collocation node, shape (s, *grid.shape).

        zhat holds the Fourier transforms of the interpolation values
        (Z_0 = y0, Z_i = stage i). With g1 given, the memory of the state
        at the start of the step is included.
        """
        d = self.grid.d
        s = len(plan.u)

        def one(kidx):
            r = self.radial[kidx]
            ages, weights, heat_t, rows, starts = plan.inner[r]
            pk = np.zeros((s,) + self.grid.shape, dtype=complex)
            if len(ages):
                vals = self._sheared(kidx, ages, heat_t, rows, zhat)
                vals *= weights.reshape((-1,) + (1,) * d)
                pk += np.add.reduceat(vals, starts, axis=0) if len(starts) else 0
                # empty groups (u_i t_N below the first node) come out as copies of the next row
                sizes = np.diff(np.append(starts, len(ages)))
                pk[sizes == 0] = 0
            pk *= -1j * self.coupling * self.amp[kidx]
            if g1 is not None:
                rho = plan.history[r]
                mixed = (rho @ g1[kidx].reshape(self.n_modes, -1)).reshape((s,) + self.grid.shape)
                for i in range(s):
                    pk[i] += self._transport(kidx, mixed[i][None], self.t_N * plan.u[i])[0]
            scale = self.coupling * self.weight[kidx] * self.amp[kidx]
            return scale * (-self.kxi[kidx]) * _fftn(pk, d)

        acc = np.zeros((s,) + self.grid.shape, dtype=complex)
        for part in self._map_k(one):
            acc += part
        return np.real(_ifftn(acc, d))

    def _update_g1(self, plan: _Plan, zhat: np.ndarray, g1: np.ndarray) -> np.ndarray:
        d = self.grid.d
        T = self.t_N * plan.dtau
        npar, nperp = self.config.hermite_parallel, self.n_perp

        def one(kidx):
            r = self.radial[kidx]
            e_par, e_perp = plan.full[r]
            cur = self._transport(kidx, g1[kidx], T).reshape(npar, nperp, -1)
            cur = (e_par @ cur.reshape(npar, -1)).reshape(npar, nperp, -1)
            cur = np.matmul(e_perp, cur).reshape(self.n_modes, -1)
            ages, weights, rows, cols = plan.source[r]
            if len(ages):
                vals = self._sheared(kidx, ages, np.full(len(ages), plan.dtau), rows, zhat)
                vals = vals.reshape(len(ages), -1) * weights[:, None]
                cur -= 1j * self.coupling * self.amp[kidx] * (cols @ vals)
            return cur.reshape((self.n_modes,) + self.grid.shape)

        return np.array(self._map_k(one)) if len(self.k) else g1

    def step(self, g0: np.ndarray, g1: np.ndarray, dtau: float, guess: np.ndarray | None = None):
        """One exponential-collocation step; returns (g0, g1, diagnostics)."""
        c = self.config
        d = self.grid.d
        if self.d0 * dtau * float(self.xi2.max()) > 40:
            raise ValueError("dtau too large for the interaction-picture heat factors")
        plan = self.plan(dtau)
        s = len(plan.u)
        shape = self.grid.shape
        y0 = np.asarray(g0, dtype=float)
        y0hat = _fftn(y0, d)
        info = {"krylov": 0}
        if not len(self.k):
            return np.real(_ifftn(plan.heat_step * y0hat, d)), g1, info

        A = dtau * self.colloc_A
        zeros = np.zeros((s,) + shape, dtype=complex)
        f0 = self._source_terms(plan, np.concatenate([y0hat[None], zeros]), g1)

        def integrate(fvals):
            back = _fftn(fvals, d) * plan.heat_back
            return np.real(_ifftn(np.einsum("ij,j...->i...", A, back), d))

        rhs = y0[None] + integrate(f0)

        def apply(flat):
            Y = flat.reshape((s,) + shape)
            zhat = np.concatenate([np.zeros((1,) + shape, dtype=complex), _fftn(Y, d)])
            info["krylov"] += 1
            return (Y - integrate(self._source_terms(plan, zhat, None))).reshape(-1)

        def precondition(flat):
            rh = _fftn(flat.reshape((s,) + shape), d)
            out = np.einsum("...ij,j...->i...", plan.precond, rh)
            return np.real(_ifftn(out, d)).reshape(-1)

        size = s * y0.size
        op = LinearOperator((size, size), matvec=apply, dtype=float)
        pre = LinearOperator((size, size), matvec=precondition, dtype=float)
        x0 = (rhs if guess is None else guess).reshape(-1)
        sol, flag = gmres(op, rhs.reshape(-1), x0=x0, M=pre, rtol=c.krylov_tol, atol=0.0,
                          restart=40, maxiter=10)
        resid = np.linalg.norm(apply(sol) - rhs.reshape(-1)) / max(np.linalg.norm(rhs), 1e-300)
        info["krylov"] -= 1
        info["residual"] = float(resid)
        if flag != 0 and resid > 10 * c.krylov_tol:
            raise ConvergenceError(f"stage system did not converge (residual {resid:.2e})")
        Y = sol.reshape((s,) + shape)
        zhat = np.concatenate([y0hat[None], _fftn(Y, d)])
        F = f0 + self._source_terms(plan, np.concatenate([np.zeros((1,) + shape, dtype=complex), zhat[1:]]), None)
        Fh = _fftn(F, d)
        new_hat = plan.heat_step * y0hat + np.einsum("j,j...->...", dtau * self.colloc_b, plan.heat_fwd * Fh)
        new_g0 = np.real(_ifftn(new_hat, d))
        new_g1 = self._update_g1(plan, zhat, g1)
        info["stages"] = Y
        return new_g0, new_g1, info


@dataclass(frozen=True)
class HierarchyState:
    g0: GridField
    g1: np.ndarray = field(repr=False)
    tau: float
    model: HierarchyModel = field(repr=False, compare=False)

    @property
    def params(self) -> dict:
        c = self.model.config
        return {"d": c.d, "m0": c.m0, "N": c.N, "kappa": c.kappa, "t_N": self.model.t_N, "beta": c.beta}

    @property
    def energy(self) -> float:
        return self.model.energy(np.real(self.g0.values), self.g1)


def step_hierarchy(state: HierarchyState, dtau: float) -> HierarchyState:
    if dtau <= 0:
        raise ValueError("dtau must be positive")
    g0, g1, _ = state.model.step(np.real(state.g0.values), state.g1, dtau)
    return HierarchyState(state.g0.with_values(g0), g1, state.tau + dtau, state.model)


def step_schedule(config: HierarchyConfig, t_N: float | None = None) -> np.ndarray:
    """Step end times: geometric start from first_step (growth * tau), then uniform dtau."""
    c = config
    t_N = c.time_scale if t_N is None else t_N
    first = c.first_step
    if first is None:
        first = 0.1 / (t_N * c.k_max * c.v_max * math.sqrt(c.d))
    first = min(first, c.dtau)
    taus = [0.0]
    while taus[-1] < c.tau_max - 1e-12:
        t = taus[-1]
        h = min(c.dtau, max(first, c.growth * t))
        # fold a sliver of a step into its predecessor
        if c.tau_max - t < 1.2 * h:
            h = c.tau_max - t
        taus.append(t + h)
    return np.array(taus)


@dataclass
class HierarchyRun:
    config: HierarchyConfig
    taus: np.ndarray
    g0: np.ndarray  # (len(taus), *grid.shape)
    energy: np.ndarray
    krylov: np.ndarray
    wall_time: float
    grid: VelocityGrid

    @property
    def tail_bound(self) -> float:
        """e^{-2 tau_max} E(tau_max): bounds the weighted-norm tail beyond tau_max."""
        return float(math.exp(-2 * self.taus[-1]) * self.energy[-1])

    @property
    def max_energy_increase(self) -> float:
        return float(np.max(np.diff(self.energy), initial=0.0))


def run_hierarchy(config: HierarchyConfig, model: HierarchyModel | None = None,
                  progress=None) -> HierarchyRun:
    """Integrate the hierarchy on [0, tau_max] and record g0 and the energy at every step."""
    if config.m0 == 2:
        return run_lattice_hierarchy(config)
    model = HierarchyModel(config) if model is None else model
    start = time.perf_counter()
    taus = step_schedule(config, model.t_N)
    state = model.initial_state()
    g0 = np.real(state.g0.values)
    g1 = state.g1
    e0 = model.energy(g0, g1)
    out_g0, energies, krylov = [g0], [e0], [0]
    guess = None
    prev = None
    for n in range(1, len(taus)):
        h = taus[n] - taus[n - 1]
        if prev is not None and abs(prev[0] - h) < 1e-15:
            guess = prev[1]
        new_g0, new_g1, info = model.step(g0, g1, h, guess)
        e = model.energy(new_g0, new_g1)
        if e - energies[-1] > config.energy_tol * max(e0, 1e-300):
            raise StabilityError(
                f"energy increased by {e - energies[-1]:.3e} at tau={taus[n]:.6g}",
                {"tau": float(taus[n]), "energy_before": energies[-1], "energy_after": e,
                 "step": float(h), "taus": taus[:n].tolist(), "energies": list(energies)},
            )
        if "stages" in info:
            prev = (h, info["stages"] + (new_g0 - g0)[None])
        g0, g1 = new_g0, new_g1
        out_g0.append(g0)
        energies.append(e)
        krylov.append(info["krylov"])
        if progress is not None:
            progress(taus[n], e)
    return HierarchyRun(config, taus, np.array(out_g0), np.array(energies), np.array(krylov),
                        time.perf_counter() - start, model.grid)


# -------------------------------------------------- experimental m0 = 2 model


def run_lattice_hierarchy(config: HierarchyConfig) -> HierarchyRun:
    """Hierarchy with up to two background particles in d = 1, for exploration only.

    Positions live on a torus, so momenta form the lattice dk Z cut at
    |k| <= k_max, and every velocity gets an explicit grid (n_v points per
    particle). g1[a] carries momentum ks[a] on particle 1 (the tagged one
    carries the opposite); g2[a, b] carries ks[a], ks[b] on particles 1, 2.
    Couplings whose merged momentum leaves the lattice are dropped in both
    directions, which keeps creation and annihilation adjoint. Classical RK4
    in slow time. Nothing here is claimed to converge.
    """
    c = config
    if c.d != 1:
        raise ValueError("the lattice hierarchy is one-dimensional")
    n_lat = c.lattice_points
    dk = c.k_max / n_lat
    ks = dk * np.arange(-n_lat, n_lat + 1)
    nk = len(ks)
    mid = n_lat
    grid = VelocityGrid(1, c.n_v, c.v_max, c.beta)
    x = grid.axis
    xi = _deriv_axis(grid)
    xi2 = grid.wavenumbers ** 2
    sm = grid.sqrt_maxwellian()
    pot = gaussian_potential(1, amplitude=c.amplitude)
    vk = np.asarray(pot(np.abs(ks)), dtype=float) * ks  # k Vhat(k)
    wk = dk / (2 * math.pi)
    tN, N = c.time_scale, c.N
    diff = c.kappa * tN / N
    coup = tN / math.sqrt(N)
    cell = grid.cell

    def deriv(a, axis):
        shp = [1] * a.ndim
        shp[axis] = -1
        return np.fft.ifft(1j * xi.reshape(shp) * np.fft.fft(a, axis=axis), axis=axis)

    def lap(a, axes):
        out = np.zeros_like(a)
        for ax in axes:
            shp = [1] * a.ndim
            shp[ax] = -1
            out += np.fft.ifft(-xi2.reshape(shp) * np.fft.fft(a, axis=ax), axis=ax)
        return out

    v0, v1 = x[:, None], x[None, :]
    v0b, v1b, v2b = x[:, None, None], x[None, :, None], x[None, None, :]

    def rhs(state):
        g0, g1, g2 = state
        out0 = diff * lap(g0, (0,))
        for a in range(nk):
            if vk[a]:
                out0 += coup * 1j * wk * vk[a] * deriv(cell * (g1[a] @ sm), 0)
        out1 = np.empty_like(g1)
        dg0 = deriv(g0, 0)
        for a in range(nk):
            k = ks[a]
            out1[a] = -tN * 1j * k * (v1 - v0) * g1[a] + diff * lap(g1[a], (0, 1))
            out1[a] -= coup * 1j * vk[a] * dg0[:, None] * sm[None, :]
        if g2 is None:
            return out0, out1, None
        for a in range(nk):
            acc = np.zeros_like(g1[a])
            for b in range(nk):
                if not vk[b]:
                    continue
                acc += wk * vk[b] * deriv(cell * np.tensordot(g2[a, b], sm, axes=(2, 0)), 0)
                a2 = a - (b - mid)
                if 0 <= a2 < nk:
                    acc += wk * vk[b] * deriv(cell * np.tensordot(g2[a2, b], sm, axes=(2, 0)), 1)
            out1[a] += coup * 1j * math.sqrt(2) * acc
        out2 = np.empty_like(g2)
        for a in range(nk):
            for b in range(nk):
                ka, kb = ks[a], ks[b]
                out2[a, b] = -tN * 1j * (-(ka + kb) * v0b + ka * v1b + kb * v2b) * g2[a, b]
                out2[a, b] += diff * lap(g2[a, b], (0, 1, 2))
                term = vk[b] * deriv(g1[a], 0)[:, :, None] * sm[None, None, :]
                term += vk[a] * deriv(g1[b], 0)[:, None, :] * sm[None, :, None]
                ab = a + b - mid
                if 0 <= ab < nk:
                    dd = deriv(g1[ab], 1)
                    term += vk[b] * dd[:, :, None] * sm[None, None, :]
                    term += vk[a] * dd[:, None, :] * sm[None, :, None]
                out2[a, b] -= coup * 1j * term / math.sqrt(2)
        return out0, out1, out2

    def energy(st):
        e = cell * float(np.sum(np.abs(st[0]) ** 2))
        e += wk * cell ** 2 * float(np.sum(np.abs(st[1]) ** 2))
        if st[2] is not None:
            e += wk * wk * cell ** 3 * float(np.sum(np.abs(st[2]) ** 2))
        return e

    g0 = initial_density(grid, c.v_star, c.width).astype(complex)
    g1 = np.zeros((nk, c.n_v, c.n_v), dtype=complex)
    g2 = np.zeros((nk, nk, c.n_v, c.n_v, c.n_v), dtype=complex) if c.m0 == 2 else None
    # RK4 contracts for skew spectra up to 2.8; stay well inside
    speed = tN * c.k_max * c.v_max * 3 + diff * 3 * float(xi2.max()) + coup * c.k_max * 3
    steps = max(1, math.ceil(c.tau_max * speed / 1.5))
    h = c.tau_max / steps
    start = time.perf_counter()
    state = (g0, g1, g2)
    taus, out, energies = [0.0], [np.real(g0)], [energy(state)]

    def axpy(st, ds, a):
        return tuple(None if s_ is None else s_ + a * d_ for s_, d_ in zip(st, ds))

    for n in range(steps):
        r1 = rhs(state)
        r2 = rhs(axpy(state, r1, h / 2))
        r3 = rhs(axpy(state, r2, h / 2))
        r4 = rhs(axpy(state, r3, h))
        state = tuple(None if s_ is None else s_ + h / 6 * (p + 2 * q + 2 * r + w)
                      for s_, p, q, r, w in zip(state, r1, r2, r3, r4))
        e = energy(state)
        if e - energies[-1] > c.energy_tol * energies[0]:
            raise StabilityError(f"energy increased at step {n + 1}",
                                 {"tau": (n + 1) * h, "energy_before": energies[-1], "energy_after": e})
        taus.append((n + 1) * h)
        out.append(np.real(state[0]))
        energies.append(e)
    return HierarchyRun(c, np.array(taus), np.array(out), np.array(energies), np.zeros(len(taus), int),
                        time.perf_counter() - start, grid)


# --------------------------------------------------------- Laplace ansatz


def laplace_invert(alpha: np.ndarray, values: np.ndarray, taus, tail: bool = True, fit_nodes: int = 6,
                   tail_decay: float = 0.0) -> np.ndarray:
    """phi(tau) = e^tau int e^{i alpha tau} Lphi(alpha) d alpha / 2 pi for real phi.

    `alpha` is a uniform grid starting at 0; negative frequencies follow by
    conjugate symmetry. With tail=True, real c1/(s+a) + c2/(s+a)^2
    (s = 1 + i alpha, a = tail_decay) is fitted at the top of the window,
    subtracted, and added back through its exact inverse
    (c1 + c2 tau) e^{-a tau}.

    The trapezoid rule with step h aliases phi(tau + 2 pi m/h) e^{-2 pi m/h}
    onto phi(tau). a = 0 is exact for affine phi; for phi that decays like
    e^{-tau}, a = 1 keeps the subtracted part from feeding that alias.
    """
    alpha = np.asarray(alpha, dtype=float)
    values = np.asarray(values, dtype=complex)
    step = alpha[1] - alpha[0]
    if abs(alpha[0]) > 1e-14 or np.max(np.abs(np.diff(alpha) - step)) > 1e-9 * step:
        raise ValueError("alpha must be a uniform grid starting at 0")
    if tail_decay < 0:
        raise ValueError("tail_decay must be nonnegative")
    taus = np.atleast_1d(np.asarray(taus, dtype=float))
    flat = values.reshape(len(alpha), -1)
    s = 1 + 1j * alpha + tail_decay
    c1 = c2 = np.zeros(flat.shape[1])
    if tail:
        sel = slice(len(alpha) - fit_nodes, len(alpha))
        basis = np.stack([1 / s[sel], 1 / s[sel] ** 2], axis=1)
        design = np.concatenate([basis.real, basis.imag])
        target = np.concatenate([flat[sel].real, flat[sel].imag])
        coef, *_ = np.linalg.lstsq(design, target, rcond=None)
        c1, c2 = coef
        flat = flat - np.outer(1 / s, c1) - np.outer(1 / s ** 2, c2)
    w = np.full(len(alpha), 2.0)
    w[0] = 1.0
    w[-1] = 1.0
    phases = np.exp(1j * np.outer(taus, alpha)) * w
    out = np.real(phases @ flat) * (step / (2 * math.pi)) * np.exp(taus)[:, None]
    out += np.exp(-tail_decay * taus)[:, None] * (c1[None] + np.outer(taus, c2))
    return out.reshape((len(taus),) + values.shape[1:])


@dataclass
class LaplaceProfile:
    alpha: np.ndarray  # uniform nodes on [-A, A]
    values: np.ndarray  # complex field per node (the remainder after the control variate)
    decay: float  # |values| at +-A over the max
    tail_estimate: float  # weighted-norm contribution of |alpha| > A, from the 1/alpha^2 tail


@dataclass
class AnsatzSolution:
    profile: LaplaceProfile
    taus: np.ndarray
    g0: np.ndarray
    reference: np.ndarray  # Fokker-Planck control variate in the time domain
    krylov: list
    wall_time: float


def _ansatz_operator(model: HierarchyModel, alpha: float) -> HatOperator:
    c = model.config
    return HatOperator(model.grid, model.potential, model.kquad, (1 + 1j * alpha) / model.t_N, model.sigma,
                       overlap="hermite", hermite_modes=c.hermite_parallel, hermite_damping=model.damping,
                       hermite_perp_modes=model.n_perp if c.d == 2 else None, transport="sheared")


def solve_ansatz_laplace(config: HierarchyConfig, taus=None, model: HierarchyModel | None = None,
                         progress=None) -> AnsatzSolution:
    """Solve (1 + i alpha + D0 (-Lap) + (t_N/N) Box(alpha)) X = g on a uniform alpha grid and invert.

    The Fokker-Planck flow with the discrete diffusion tensor is subtracted
    exactly (eigendecomposition, in both alpha and tau); only the remainder
    goes through the trapezoidal inversion.
    """
    c = config
    if c.kappa <= 0:
        raise ValueError("the ansatz solver needs kappa > 0")
    start = time.perf_counter()
    model = HierarchyModel(c) if model is None else model
    grid = model.grid
    g = initial_density(grid, c.v_star, c.width)
    taus = step_schedule(c, model.t_N) if taus is None else np.asarray(taus, dtype=float)
    tensor = discrete_tensor_on_grid(grid, model.kquad, model.potential) * (model.t_N / c.N)
    flow = FokkerPlanckFlow(grid, model.d0, tensor if len(model.k) else None)
    alpha = np.arange(0.0, c.alpha_max + 0.5 * c.alpha_step, c.alpha_step)
    size = grid.size
    xi2 = _deriv_xi2(grid)
    abar = float(np.trace(model.mean_tensor)) / grid.d * (model.t_N / c.N)
    remainder = np.empty((len(alpha),) + grid.shape, dtype=complex)
    krylov = []
    for j, a in enumerate(alpha):
        s = 1 + 1j * a
        ref = flow.resolvent(g, s)
        if not len(model.k):
            remainder[j] = 0.0
            krylov.append(0)
            continue
        op_hat = _ansatz_operator(model, a)
        denom = s + (model.d0 + abar) * xi2

        def matvec(x, op_hat=op_hat, s=s):
            u = x.reshape(grid.shape)
            return (s * u - model.d0 * np.fft.ifftn(-xi2 * np.fft.fftn(u)) + (model.t_N / c.N) * op_hat.apply(u)).reshape(-1)

        count = [0]

        def pre(r, denom=denom):
            count[0] += 1
            return np.fft.ifftn(np.fft.fftn(r.reshape(grid.shape)) / denom).reshape(-1)

        op = LinearOperator((size, size), matvec=matvec, dtype=complex)
        M = LinearOperator((size, size), matvec=pre, dtype=complex)
        rhs = g.reshape(-1).astype(complex)
        x, info = gmres(op, rhs, x0=ref.reshape(-1), M=M, rtol=1e-12, atol=0.0, restart=60, maxiter=20)
        res = np.linalg.norm(matvec(x) - rhs) / np.linalg.norm(rhs)
        if res > 1e-10:
            raise ConvergenceError(f"ansatz solve at alpha={a} did not converge (residual {res:.2e})")
        remainder[j] = x.reshape(grid.shape) - ref
        krylov.append(count[0])
        if progress is not None:
            progress(a)
    norms = np.array([grid.norm(r) for r in remainder])
    decay = float(norms[-1] / max(norms.max(), 1e-300))
    A = alpha[-1]
    # |R| ~ C/alpha^2 beyond the window: int_{|alpha|>A} |R|^2 d alpha/2pi = C^2/(3 pi A^3)
    tail_abs = norms[-1] * A * A / math.sqrt(3 * math.pi * A ** 3) if A > 0 else float("inf")
    reference = flow.evolve(g, taus)
    # the remainder behaves like a damped heat flow, hence the decaying tail basis
    values = reference + laplace_invert(alpha, remainder, taus, tail_decay=1.0)
    scale = weighted_norm(taus, values, grid)
    tail = tail_abs / max(scale, 1e-300)
    full_alpha = np.concatenate([-alpha[:0:-1], alpha])
    full_vals = np.concatenate([np.conj(remainder[:0:-1]), remainder])
    profile = LaplaceProfile(full_alpha, full_vals, decay, tail)
    if len(model.k) and tail > c.laplace_tail_tol:
        raise LaplaceWindowError(f"alpha window too small: estimated tail {tail:.2e} > {c.laplace_tail_tol:.1e}")
    return AnsatzSolution(profile, taus, values, reference, krylov, time.perf_counter() - start)


# ---------------------------------------------------------- convergence


def weighted_norm(taus, values, grid: VelocityGrid) -> float:
    """(int_0^tau_max e^{-2 tau} |f(tau)|^2 d tau)^{1/2} by the trapezoidal rule."""
    taus = np.asarray(taus, dtype=float)
    sq = np.array([grid.norm(v) ** 2 for v in values]) * np.exp(-2 * taus)
    return float(math.sqrt(np.trapezoid(sq, taus)))


@dataclass
class ConvergenceRow:
    N: float
    error: float  # weighted error against Fokker-Planck with the Landau tensor
    error_discrete: float  # against Fokker-Planck with the quadrature tensor
    sup_error: float
    energy_monotone: bool
    max_energy_increase: float
    tail_bound: float
    steps: int
    wall_time: float


@dataclass
class ConvergenceTable:
    rows: list
    rate: float
    rate_discrete: float
    monotone: bool
    reference_norm: float
    runs: dict = field(default_factory=dict, repr=False)

    def as_records(self) -> list[dict]:
        return [asdict(r) for r in self.rows]


def fitted_rate(Ns, errors) -> float:
    slope, _ = np.polyfit(np.log(np.asarray(Ns, dtype=float)), np.log(np.asarray(errors, dtype=float)), 1)
    return float(-slope)


def convergence_study(N_list, config: HierarchyConfig | None = None, progress=None,
                      on_row=None) -> ConvergenceTable:
    """Run the hierarchy with t_N = N for each N and compare g0 with the Fokker-Planck flow."""
    config = HierarchyConfig() if config is None else config
    Ns = sorted(float(n) for n in N_list)
    # three octaves: the standard sweep 25..200 spans a factor of 8
    if len(Ns) < 3 or Ns[-1] / Ns[0] < 8 - 1e-9:
        raise ValueError("need at least 3 values of N spanning a factor of 8")
    if config.m0 != 1:
        raise ValueError("the convergence study is defined for m0 = 1")
    base = replace(config, N=Ns[0], t_N=None)
    model0 = HierarchyModel(base)
    grid = model0.grid
    g = initial_density(grid, config.v_star, config.width)
    landau = FokkerPlanckFlow(grid, config.kappa, landau_tensor_on_grid(grid, model0.potential))
    disc = FokkerPlanckFlow(grid, config.kappa, discrete_tensor_on_grid(grid, model0.kquad, model0.potential))
    rows = []
    runs = {}
    ref_norm = None
    for N in Ns:
        cfg = replace(config, N=N, t_N=None)
        try:
            run = run_hierarchy(cfg, progress=progress)
        except Exception as exc:
            raise StudyAborted(f"run at N={N:g} failed: {exc}", rows) from exc
        ref = landau.evolve(g, run.taus)
        ref_d = disc.evolve(g, run.taus)
        if ref_norm is None:
            ref_norm = weighted_norm(run.taus, ref, grid)
        diff = run.g0 - ref
        row = ConvergenceRow(
            N=N,
            error=weighted_norm(run.taus, diff, grid),
            error_discrete=weighted_norm(run.taus, run.g0 - ref_d, grid),
            sup_error=float(max(grid.norm(x) for x in diff)),
            energy_monotone=bool(run.max_energy_increase <= config.energy_tol * run.energy[0]),
            max_energy_increase=run.max_energy_increase,
            tail_bound=run.tail_bound,
            steps=len(run.taus) - 1,
            wall_time=run.wall_time,
        )
        rows.append(row)
        runs[N] = run
        if on_row is not None:
            on_row(row)
    errs = [r.error for r in rows]
    return ConvergenceTable(
        rows=rows,
        rate=fitted_rate(Ns, errs),
        rate_discrete=fitted_rate(Ns, [r.error_discrete for r in rows]),
        monotone=bool(all(b < a for a, b in zip(errs, errs[1:]))),
        reference_norm=float(ref_norm),
        runs=runs,
    )


def refinement_study(config: HierarchyConfig, sizes) -> dict:
    """Weighted error against Fokker-Planck at fixed N for a sequence of velocity grids.

    `plateau` is set when the last two errors differ by less than 5 percent,
    i.e. the error is no longer limited by the grid.
    """
    errors = []
    for n in sizes:
        cfg = replace(config, n_v=int(n))
        model = HierarchyModel(cfg)
        run = run_hierarchy(cfg, model=model)
        flow = FokkerPlanckFlow(model.grid, cfg.kappa, landau_tensor_on_grid(model.grid, model.potential))
        ref = flow.evolve(initial_density(model.grid, cfg.v_star, cfg.width), run.taus)
        errors.append(weighted_norm(run.taus, run.g0 - ref, model.grid))
    changes = [abs(b - a) / max(b, 1e-300) for a, b in zip(errors, errors[1:])]
    return {"sizes": list(sizes), "errors": errors, "changes": changes,
            "plateau": bool(changes and changes[-1] < 0.05)}
