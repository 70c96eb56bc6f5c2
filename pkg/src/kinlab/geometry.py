"""Simplex volumes, normal directions, positive directions and integrability scans."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog
from scipy.special import beta as beta_fn

DEGENERACY_RTOL = 1e-12


class DegenerateSimplexError(ValueError):
    pass


def _as_rows(vectors) -> np.ndarray:
    arr = np.atleast_2d(np.asarray(vectors, dtype=float))
    if arr.ndim != 2:
        raise ValueError("expected a sequence of d-vectors")
    return arr


def _gram_sqrt(columns: np.ndarray) -> np.ndarray:
    """sqrt(det(A^T A)) for a stack of d x m matrices, via QR for stability."""
    if columns.shape[-1] == 0:
        return np.ones(columns.shape[:-2])
    r = np.linalg.qr(columns, mode="r")
    return np.abs(np.prod(np.diagonal(r, axis1=-2, axis2=-1), axis=-1))


def simplex_volume(vertices, include_origin: bool = True) -> float:
    """n-dimensional measure of conv(0, u1..un), or (n-1)-measure of conv(u1..un)."""
    u = _as_rows(vertices)
    n, d = u.shape
    if include_origin:
        if d < n:
            return 0.0
        return float(_gram_sqrt(u.T)) / math.factorial(n)
    if d < n - 1:
        return 0.0
    diffs = (u[1:] - u[0]).T
    return float(_gram_sqrt(diffs)) / math.factorial(n - 1)


def simplex_volume_batch(k: np.ndarray) -> np.ndarray:
    """Volumes of conv(0, k_1..k_n) for an array of shape (..., n, d)."""
    n = k.shape[-2]
    return _gram_sqrt(np.swapaxes(k, -1, -2)) / math.factorial(n)


def normal_direction(vertices) -> np.ndarray:
    """Unit normal o to the affine hull of u1..un, pointing away from the origin.

    Every vertex has the same height u_i.o, the distance from 0 to the hull.
    """
    u = _as_rows(vertices)
    n, d = u.shape
    if d < n:
        raise DegenerateSimplexError("need d >= n")
    diffs = (u[1:] - u[0]).T
    if n > 1:
        gram = diffs.T @ diffs
        scale = max(float(np.max(np.abs(np.diag(gram)))), 1e-300) ** (n - 1)
        if abs(np.linalg.det(gram)) <= DEGENERACY_RTOL * scale:
            raise DegenerateSimplexError("vertices are affinely dependent")
        # project onto the orthogonal complement directly; u0 - proj(u0)
        # cancels badly when the hull passes close to the origin
        q, _ = np.linalg.qr(diffs, mode="complete")
        perp = q[:, n - 1:]
        residual = perp @ (perp.T @ u[0])
    else:
        residual = u[0].copy()
    norm = float(np.linalg.norm(residual))
    if norm <= DEGENERACY_RTOL * max(float(np.linalg.norm(u[0])), 1e-300):
        raise DegenerateSimplexError("the affine hull contains the origin")
    return residual / norm


def pyramid_residual(vertices) -> float:
    """max_i |u_i.o - n |conv(0,u)|_n / |conv(u)|_{n-1}| relative to the right-hand side."""
    u = _as_rows(vertices)
    n = u.shape[0]
    o = normal_direction(u)
    rhs = n * simplex_volume(u, True) / simplex_volume(u, False)
    heights = u @ o
    return float(np.max(np.abs(heights - rhs)) / abs(rhs))


def common_positive_direction(vectors, margin: float = 1e-10) -> np.ndarray | None:
    """A unit nu with nu.k_j > 0 for every j, or None when none exists.

    Solves max t subject to nu.khat_j >= t, |nu_i| <= 1; a direction exists
    exactly when the optimum is positive.
    """
    k = _as_rows(vectors)
    norms = np.linalg.norm(k, axis=1)
    if np.any(norms == 0.0):
        return None
    khat = k / norms[:, None]
    n, d = khat.shape
    c = np.zeros(d + 1)
    c[-1] = -1.0
    a_ub = np.hstack([-khat, np.ones((n, 1))])
    res = linprog(c, A_ub=a_ub, b_ub=np.zeros(n), bounds=[(-1, 1)] * d + [(None, 1)], method="highs")
    if res.status != 0 or -res.fun <= margin:
        return None
    nu = res.x[:d] / np.linalg.norm(res.x[:d])
    if np.all(k @ nu > 0):
        return nu
    return None


# ------------------------------------------------------------ integrability


@dataclass(frozen=True)
class ScanRow:
    s: float
    verdict: str  # finite | divergent | inconclusive
    slope: float
    slope_fine: float
    estimate: float
    threshold: float

    def to_dict(self) -> dict:
        return {
            "s": self.s,
            "verdict": self.verdict,
            "slope": self.slope,
            "slope_fine": self.slope_fine,
            "estimate": self.estimate,
            "threshold": self.threshold,
        }


@dataclass(frozen=True)
class IntegrabilityScan:
    n: int
    d: int
    rows: list[ScanRow]
    settings: dict = field(default_factory=dict)

    def verdict(self, s: float) -> str:
        for row in self.rows:
            if row.s == s:
                return row.verdict
        raise KeyError(s)


def _uniform_ball(rng: np.random.Generator, size: tuple, dim: int) -> np.ndarray:
    g = rng.standard_normal(size + (dim,))
    g /= np.linalg.norm(g, axis=-1, keepdims=True)
    rad = rng.random(size + (1,)) ** (1.0 / dim)
    return g * rad


def _shell_means(n: int, d: int, s_values: np.ndarray, samples: int, shells: int,
                 rng: np.random.Generator) -> np.ndarray:
    """Per-shell contributions I_j(s) to E|conv(0,k)|^s over the unit polyball.

    Shell j holds configurations whose last vector has distance in
    [2^{-j-1}, 2^{-j}) from the span of the others.  The first n-1 vectors
    are shared across shells (common random numbers) so shell ratios are
    insensitive to their heavy-tailed volume factor.
    """
    head = _uniform_ball(rng, (samples, n - 1), d) if n > 1 else np.zeros((samples, 0, d))
    if n > 1:
        q, _ = np.linalg.qr(np.swapaxes(head, -1, -2), mode="complete")
        span, perp = q[..., : n - 1], q[..., n - 1:]
    else:
        span = np.zeros((samples, d, 0))
        perp = np.broadcast_to(np.eye(d), (samples, d, d))
    a = d - n  # radial exponent of the perpendicular distance
    b = (n - 1) / 2
    norm_const = 0.5 * beta_fn((a + 1) / 2, b + 1)
    perp_dim = d - n + 1
    out = np.empty((shells, len(s_values)))
    for j in range(shells):
        lo, hi = 2.0 ** (-j - 1), 2.0 ** (-j)
        u = rng.random(samples)
        r = (lo ** (a + 1) + u * (hi ** (a + 1) - lo ** (a + 1))) ** (1.0 / (a + 1))
        direction = rng.standard_normal((samples, perp_dim))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        par = _uniform_ball(rng, (samples,), n - 1) * np.sqrt(1 - r * r)[:, None] if n > 1 else None
        last = np.einsum("spq,sq->sp", perp, direction) * r[:, None]
        if par is not None:
            last = last + np.einsum("spq,sq->sp", span, par)
        k = np.concatenate([head, last[:, None, :]], axis=1)
        vol = simplex_volume_batch(k)
        weight = (1 - r * r) ** b
        mass = (hi ** (a + 1) - lo ** (a + 1)) / (a + 1) / norm_const
        with np.errstate(divide="ignore"):
            logv = np.log(vol)
        out[j] = mass * np.mean(weight[:, None] * np.exp(np.outer(logv, s_values)), axis=0)
    return out


def _fit_slope(values: np.ndarray, first: int) -> float:
    j = np.arange(first, len(values))
    y = np.log2(values[first:])
    return float(np.polyfit(j, y, 1)[0])


def integrability_scan(n: int, d: int, s_list, samples: tuple[int, int] = (20_000, 200_000),
                       shells: int = 16, fit_from: int = 4, dead_zone: float = 0.05,
                       seed: int = 0) -> IntegrabilityScan:
    """Classify local integrability of |conv(0,k_1..k_n)|^s over the unit polyball.

    For each s the dyadic-shell contributions I_j are fitted as 2^{slope j}:
    a negative slope means the shell series converges (finite), a positive
    one that it grows without bound (divergent).  Both sample sizes must agree
    and clear the dead zone, otherwise the verdict is inconclusive.
    """
    if n < 1 or d < n - 1:
        raise ValueError("need n >= 1 and d >= n-1")
    s_values = np.asarray(list(s_list), dtype=float)
    threshold = float(n - 1 - d)
    settings = {"samples": list(samples), "shells": shells, "fit_from": fit_from,
                "dead_zone": dead_zone, "seed": seed}
    if d == n - 1:
        # conv(0,k) is flat: the integrand is 0, 1 or +inf
        rows = [ScanRow(float(s), "finite" if s >= 0 else "divergent", math.nan, math.nan,
                        1.0 if s == 0 else (0.0 if s > 0 else math.inf), threshold) for s in s_values]
        return IntegrabilityScan(n, d, rows, settings)
    seeds = np.random.SeedSequence(seed).spawn(len(samples))
    tables = [_shell_means(n, d, s_values, m, shells, np.random.default_rng(sq))
              for m, sq in zip(samples, seeds)]
    rows = []
    for idx, s in enumerate(s_values):
        if s == 0:
            rows.append(ScanRow(0.0, "finite", math.nan, math.nan, 1.0, threshold))
            continue
        slopes = [_fit_slope(t[:, idx], fit_from) for t in tables]
        if all(sl < -dead_zone for sl in slopes):
            verdict = "finite"
        elif all(sl > dead_zone for sl in slopes):
            verdict = "divergent"
        else:
            verdict = "inconclusive"
        fine = tables[-1][:, idx]
        estimate = float(np.sum(fine))
        if verdict == "finite":
            # geometric tail beyond the last shell
            ratio = 2.0 ** slopes[-1]
            estimate += float(fine[-1] * ratio / (1 - ratio))
        elif verdict == "divergent":
            estimate = math.inf
        rows.append(ScanRow(float(s), verdict, slopes[0], slopes[-1], estimate, threshold))
    return IntegrabilityScan(n, d, rows, settings)


def d0_threshold(m0: int) -> int:
    """Minimal space dimension for a given truncation order."""
    if m0 < 1:
        raise ValueError("m0 must be >= 1")
    if m0 == 1:
        return 2
    if m0 == 2:
        return 8
    return 28 * m0 + 70
