"""Numerical checks behind the subcommands and the audit.

Every check takes the validated parameter dict of its subcommand and returns a
CheckResult: a verdict, scalar metrics, and tables to persist.  Wall-clock
times are kept out of the results so that persisted files are reproducible.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from .. import combinatorics as cb
from .. import geometry as geo
from .. import hierarchy_sim as hs
from .. import landau as ld
from .. import spectral_ops as so
from .persistence import Table

log = logging.getLogger("kinlab")


@dataclass
class CheckResult:
    name: str
    passed: bool
    metrics: dict = field(default_factory=dict)
    outputs: dict[str, Any] = field(default_factory=dict)

    def summary(self) -> dict:
        return {"passed": self.passed, "metrics": self.metrics}


# ------------------------------------------------------------------ diagrams


def closure_check(p: dict) -> CheckResult:
    """Admissible closure, its boundary and remainder catalog for (m0, max_len)."""
    m0, K = p["m0"], p["max_len"]
    omega = cb.admissible_closure(m0, K)
    bnd = cb.boundary(omega, m0)
    catalog = cb.remainder_catalog(omega, m0)
    lengths_ok = all(K + 1 <= len(b) <= K + m0 + 1 for b in bnd)
    ok = cb.is_admissible(omega, m0) and lengths_ok
    return CheckResult("closure", ok,
                       {"abstracts": len(omega), "boundary": len(bnd), "catalog_entries": len(catalog),
                        "boundary_lengths_ok": lengths_ok},
                       {"closure": {"m0": m0, "max_len": K, "abstracts": [a.to_dict() for a in omega]},
                        "boundary": [a.to_dict() for a in bnd],
                        "catalog": [e.to_dict() for e in catalog]})


def boundary_example_check(p: dict | None = None) -> CheckResult:
    """The two-element set {(-1), (-1,-1)} at m0 = 2: boundary and six-history remainder."""
    omega = cb.admissible_closure(2, 1)
    got = sorted(a.signs for a in omega)
    bnd = sorted(b.signs for b in cb.boundary(omega, 2))
    degree_one = [e for e in cb.remainder_catalog(omega, 2) if e.degree == 1]
    six = sum(e.histories for e in degree_one)
    # independent count: explicit enumeration of the boundary abstract's histories
    enumerated = sum(len(cb.enumerate_histories(cb.abstract_from_signs(e.signs, 2))) for e in degree_one)
    ok = (got == [(-1,), (-1, -1)] and bnd == [(1, -1), (1, -1, -1)] and six == 6 and enumerated == 6)
    return CheckResult("boundary_example", ok,
                       {"omega": [list(s) for s in got], "boundary": [list(s) for s in bnd],
                        "degree_one_histories": six, "enumerated_histories": enumerated})


def audit_check(p: dict) -> CheckResult:
    """Exact bad-index and tent audit for every m0 <= p['m0'] up to length p['audit_len']."""
    rows = []
    ok = True
    for m0 in range(1, p["m0"] + 1):
        rep = cb.bad_index_audit(m0, p["audit_len"])
        ok &= rep.passed
        for r in rep.records:
            rows.append({"m0": m0, "signs": " ".join(str(s) for s in r.abstract.signs),
                         "degree": r.abstract.degree, "histories": r.histories,
                         "max_bad": -1 if r.max_bad is None else r.max_bad,
                         "bound": float(r.bound), "tent_violation": r.tent_violation, "ok": r.ok})
    total = sum(r["histories"] for r in rows)
    bad = sum(not r["ok"] for r in rows)
    return CheckResult("bad_index_audit", bool(ok),
                       {"abstracts": len(rows), "histories": total, "violations": bad},
                       {"audit": Table.from_records(rows, ["m0", "signs", "degree", "histories", "max_bad",
                                                           "bound", "tent_violation", "ok"])})


def _numeric_momenta(h: cb.History, basis: np.ndarray) -> list[np.ndarray]:
    """Particle momenta after every step, tracked directly from the collisions."""
    m = h.abstract.degree
    n_particles = basis.shape[0] + 1
    q = np.zeros((n_particles, basis.shape[1]))
    for ell in range(1, m + 1):
        q[0] -= basis[ell - 1]
        q[ell] += basis[ell - 1]
    out = [q.copy()]
    for s, a, b in h.collisions:
        if s == 1:
            q[a] -= basis[b - 1]
            q[b] = basis[b - 1]
        else:
            q[a] += q[b]
            q[b] = 0.0
        out.append(q.copy())
    return out


def momentum_check(p: dict) -> CheckResult:
    """Random histories: integer table invariants and a floating-point replay
    with random momenta must agree, and total momentum must vanish."""
    rng = np.random.default_rng(p["seed"])
    pool = [a for a in cb.all_abstracts(p["m0"], p["sample_len"]) if cb.count_histories(a) > 0]
    failures = 0
    max_sum = 0.0
    for _ in range(p["samples"]):
        a = pool[rng.integers(len(pool))]
        h = cb.random_history(a, rng)
        table = cb.wave_vector_table(h)
        basis = rng.standard_normal((table.S, 3))
        replay = _numeric_momenta(h, basis)
        ok = table.check()
        for i, q in enumerate(replay):
            ok &= bool(np.allclose(table.coeffs[i].astype(float) @ basis, q, atol=1e-12))
            max_sum = max(max_sum, float(np.abs(q.sum(axis=0)).max()))
        failures += not ok
    ok = failures == 0 and max_sum < 1e-12 and p["samples"] > 0
    return CheckResult("momentum", ok, {"samples": p["samples"], "failures": failures,
                                        "max_total_momentum": max_sum, "pool": len(pool)})


# -------------------------------------------------------------------- landau


def kernel_check(p: dict) -> CheckResult:
    pot = ld.gaussian_potential(p["d"], amplitude=p["amplitude"])
    rng = np.random.default_rng(p["seed"])
    rows = []
    for i in range(p["samples"]):
        direction = rng.standard_normal(p["d"])
        w = direction / np.linalg.norm(direction) * rng.uniform(p["w_min"], p["w_max"])
        exact = ld.landau_kernel(w, pot).value
        brute = ld.landau_kernel_bruteforce(w, pot, delta=p["delta"], levels=p["levels"]).value
        err = float(np.linalg.norm(exact - brute, 2) / np.linalg.norm(exact, 2))
        rows.append({"sample": i, **{f"w{j}": float(w[j]) for j in range(p["d"])}, "rel_error": err})
    worst = max(r["rel_error"] for r in rows) if rows else math.inf
    return CheckResult("landau_kernel", worst <= p["rtol"], {"max_rel_error": worst, "lambda_V": ld.lambda_V(pot)},
                       {"kernel": Table.from_records(rows)})


def constants_table(p: dict) -> CheckResult:
    """Interaction constants and eigenvalues of A0(v) on a square of velocities."""
    pot = ld.gaussian_potential(p["d"], amplitude=p["amplitude"])
    constants = {"potential": pot.to_dict(), "beta": p["beta"], "lambda_V": ld.lambda_V(pot),
                 "kappa_threshold": ld.kappa_threshold_constant(pot),
                 "c_s": {str(s): ld.c_s_constant(pot, s) for s in range(p["d"] + 1)}}
    axis = np.linspace(-p["tensor_extent"], p["tensor_extent"], p["tensor_points"])
    vs = np.zeros((len(axis) ** 2, p["d"]))
    vs[:, :2] = np.stack(np.meshgrid(axis, axis, indexing="ij"), axis=-1).reshape(-1, 2)
    tensors = ld.diffusion_tensor(vs, pot, p["beta"])
    eig = np.linalg.eigvalsh(tensors)
    rows = [{"v0": v[0], "v1": v[1], **{f"eig{j}": e[j] for j in range(p["d"])}} for v, e in zip(vs, eig)]
    min_eig = float(eig.min())
    return CheckResult("diffusion_tensor", min_eig >= -1e-10, {"min_eigenvalue": min_eig},
                       {"constants": constants, "diffusion_eigenvalues": Table.from_records(rows)})


# ----------------------------------------------------------------- resolvent


def green_check(p: dict) -> CheckResult:
    rows = []
    for case in p["green_cases"]:
        d, n, sigma, re, im = int(case[0]), int(case[1]), case[2], case[3], case[4]
        k = np.array(case[5:5 + d], dtype=float)
        grid = so.grid_for(d, n)
        f = so.GridField(grid, grid.maxwellian() * (1 + grid.mesh()[0]))
        par = so.ResolventParams(complex(re, im), k, sigma)
        a = so.resolvent_green(par, f).values
        b = so.resolvent_direct(par, f).values
        rows.append({"d": d, "n_pts": n, "unknowns": grid.size, "sigma": sigma, "omega_re": re, "omega_im": im,
                     "k_norm": float(np.linalg.norm(k)), "rel_diff": grid.norm(a - b) / grid.norm(b)})
    worst = max(r["rel_diff"] for r in rows)
    dims = {r["d"] for r in rows}
    return CheckResult("green_vs_direct", worst <= p["green_rtol"] and {1, 2} <= dims,
                       {"max_rel_diff": worst}, {"green": Table.from_records(rows)})


def airy_check(p: dict) -> CheckResult:
    fit = so.airy_scaling_fit(p["airy_N"], p["airy_k"], kappa=p["airy_kappa"])
    ok = abs(fit.exponent_N - 1 / 3) <= p["airy_tol"] and abs(fit.exponent_k + 2 / 3) <= p["airy_tol"]
    table = Table.from_records([dict(zip(("N", "k_norm", "norm"), r)) for r in fit.table]) if fit.table else Table([])
    return CheckResult("airy_scaling", bool(ok),
                       {"exponent_N": fit.exponent_N, "exponent_k": fit.exponent_k, "residual": fit.residual},
                       {"airy": table})


def contour_check(p: dict) -> CheckResult:
    rows = []
    for kn in p["contour_k"]:
        k = np.zeros(p["contour_d"])
        k[0] = kn
        direct, deformed = so.deformed_velocity_average(k, p["t_N"], p["kappa"], p["N"])
        rows.append({"k_norm": kn, "direct_re": direct.real, "direct_im": direct.imag,
                     "deformed_re": deformed.real, "deformed_im": deformed.imag,
                     "rel_diff": abs(direct - deformed) / abs(direct), "k_times_abs": kn * abs(direct)})
    worst = max(r["rel_diff"] for r in rows)
    bound = max(r["k_times_abs"] for r in rows)
    return CheckResult("contour_deformation", worst <= p["contour_rtol"] and bound <= p["contour_bound"],
                       {"max_rel_diff": worst, "max_k_times_abs": bound}, {"contour": Table.from_records(rows)})


def _smooth_field(grid: so.VelocityGrid, rng: np.random.Generator) -> np.ndarray:
    """Random polynomial times a Gaussian of random width and centre."""
    x, y = grid.mesh()
    c = rng.standard_normal((5, 5)) / (1 + np.add.outer(np.arange(5), np.arange(5))) ** 2
    centre = rng.uniform(-1.5, 1.5, 2)
    width = rng.uniform(0.7, 1.5)
    poly = sum(c[a, b] * (x - centre[0]) ** a * (y - centre[1]) ** b for a in range(5) for b in range(5))
    return poly * np.exp(-((x - centre[0]) ** 2 + (y - centre[1]) ** 2) / (2 * width ** 2))


def hat_check(p: dict) -> CheckResult:
    """Re<g, box g> >= -tol |grad g|^2 on random fields, and S+ = (S-)* on a two-slot grid."""
    rng = np.random.default_rng(p["hat_seed"])
    grid = so.grid_for(2, p["hat_n_pts"])
    pot = ld.gaussian_potential(2)
    kq = so.polar_k_quadrature(2, 8, 16, 4.5)
    worst = math.inf
    ops: dict[float, so.HatOperator] = {}
    for i in range(p["hat_fields"]):
        alpha = float(rng.choice(p["hat_alphas"]))
        if alpha not in ops:
            ops[alpha] = so.HatOperator(grid, pot, kq, (1 + 1j * alpha) / p["t_N"], p["kappa"] / p["N"])
        g = _smooth_field(grid, rng)
        ratio = ops[alpha].quadratic_form(g).real / grid.norm(grid.grad(g)) ** 2
        worst = min(worst, ratio)
    g0, g1 = so.grid_for(2, 16), so.grid_for(2, 16)
    kq2 = so.polar_k_quadrature(2, 4, 8, 4.5)
    shape = (len(kq2.nodes),) + g0.shape + g1.shape
    f = rng.standard_normal(g0.shape) + 1j * rng.standard_normal(g0.shape)
    h = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    left = so.two_slot_inner(so.apply_S_minus(f, kq2.nodes, pot, g0, g1), h, kq2.weights, g0, g1)
    right = g0.inner(f, so.apply_S_plus(h, kq2.nodes, kq2.weights, pot, g0, g1))
    adj = abs(left - right) / abs(left)
    ok = worst >= -p["hat_tol"] and adj <= p["adjoint_tol"]
    return CheckResult("hat_operator", bool(ok), {"min_ratio": worst, "adjoint_rel_diff": adj,
                                                  "fields": p["hat_fields"]})


# ------------------------------------------------------------------ geometry


def pyramid_check(p: dict) -> CheckResult:
    rng = np.random.default_rng(p["seed"])
    worst = 0.0
    by_shape: dict[tuple, float] = {}
    for _ in range(p["samples"]):
        n = int(rng.integers(1, p["n_max"] + 1))
        d = int(rng.integers(n, p["d_max"] + 1))
        r = geo.pyramid_residual(rng.standard_normal((n, d)))
        worst = max(worst, r)
        by_shape[(n, d)] = max(by_shape.get((n, d), 0.0), r)
    rows = [{"n": n, "d": d, "max_residual": v} for (n, d), v in sorted(by_shape.items())]
    return CheckResult("pyramid", worst < p["pyramid_rtol"], {"max_residual": worst, "samples": p["samples"]},
                       {"pyramid": Table.from_records(rows, ["n", "d", "max_residual"])})


def scan_check(p: dict) -> CheckResult:
    rows = []
    ok = True
    for n, d in p["scan"]:
        threshold = n - 1 - d
        s_list = [threshold + p["offset"], threshold - p["offset"]]
        scan = geo.integrability_scan(n, d, s_list, samples=tuple(p["scan_samples"]), seed=p["seed"])
        above, below = scan.verdict(s_list[0]), scan.verdict(s_list[1])
        ok &= above == "finite" and below == "divergent"
        for r in scan.rows:
            rows.append({"n": n, "d": d, **r.to_dict()})
    cols = list(rows[0]) if rows else []
    return CheckResult("integrability", bool(ok), {"pairs": len(p["scan"])},
                       {"integrability": Table.from_records(rows, cols)})


# ----------------------------------------------------------------- hierarchy


@dataclass
class HierarchyCache:
    """Runs shared between the hierarchy checks (keyed by N)."""
    runs: dict[float, hs.HierarchyRun] = field(default_factory=dict)
    table: hs.ConvergenceTable | None = None


def _run_table(run: hs.HierarchyRun, reference: np.ndarray | None) -> Table:
    grid = run.grid
    cols = {"tau": run.taus, "energy": run.energy, "norm_g0": [grid.norm(x) for x in run.g0],
            "mass_g0": [float(grid.integrate(x * grid.sqrt_maxwellian()).real) for x in run.g0]}
    if reference is not None:
        cols["error_fp"] = [grid.norm(a - b) for a, b in zip(run.g0, reference)]
    return Table.from_columns(**cols)


def hierarchy_run_check(cfg: hs.HierarchyConfig, cache: HierarchyCache | None = None) -> CheckResult:
    model = hs.HierarchyModel(cfg)
    run = hs.run_hierarchy(cfg, model=model, progress=_progress(f"N={cfg.N:g}"))
    if cache is not None:
        cache.runs[cfg.N] = run
    metrics = {"steps": len(run.taus) - 1, "max_energy_increase": run.max_energy_increase,
               "energy_initial": float(run.energy[0]), "energy_final": float(run.energy[-1]),
               "krylov_total": int(np.sum(run.krylov)), "tail_bound": run.tail_bound}
    ref = None
    if cfg.m0 == 1:
        grid = model.grid
        flow = hs.FokkerPlanckFlow(grid, cfg.kappa, hs.landau_tensor_on_grid(grid, model.potential))
        ref = flow.evolve(hs.initial_density(grid, cfg.v_star, cfg.width), run.taus)
        metrics["weighted_error_fp"] = hs.weighted_norm(run.taus, run.g0 - ref, grid)
        metrics["weighted_norm"] = hs.weighted_norm(run.taus, run.g0, grid)
    ok = run.max_energy_increase <= cfg.energy_tol * run.energy[0]
    return CheckResult("hierarchy_run", bool(ok), metrics, {"series": _run_table(run, ref)})


def convergence_check(cfg: hs.HierarchyConfig, N_list, cache: HierarchyCache | None = None,
                      rate_window=(0.7, 1.3)) -> CheckResult:
    cache = HierarchyCache() if cache is None else cache
    table = hs.convergence_study(N_list, cfg, progress=_progress("study"),
                                 on_row=lambda r: log.info("N=%g error=%.6e", r.N, r.error))
    cache.table = table
    cache.runs.update(table.runs)
    cols = ["N", "error", "error_discrete", "sup_error", "energy_monotone", "max_energy_increase",
            "tail_bound", "steps"]
    ok = table.monotone and rate_window[0] <= table.rate <= rate_window[1]
    return CheckResult("convergence", bool(ok),
                       {"rate": table.rate, "rate_discrete": table.rate_discrete, "monotone": table.monotone,
                        "reference_norm": table.reference_norm,
                        "errors": [r.error for r in table.rows]},
                       {"convergence": Table.from_records(table.as_records(), cols)})


def ansatz_check(cfg: hs.HierarchyConfig, cache: HierarchyCache | None = None, rtol: float = 1e-3) -> CheckResult:
    """Laplace-domain ansatz against the time-domain hierarchy at the same output times."""
    cache = HierarchyCache() if cache is None else cache
    model = hs.HierarchyModel(cfg)
    run = cache.runs.get(cfg.N)
    if run is None or run.config != cfg:
        run = hs.run_hierarchy(cfg, model=model, progress=_progress(f"N={cfg.N:g}"))
        cache.runs[cfg.N] = run
    sol = hs.solve_ansatz_laplace(cfg, taus=run.taus, model=model, progress=_progress("alpha"))
    grid = model.grid
    disc = hs.FokkerPlanckFlow(grid, cfg.kappa, hs.discrete_tensor_on_grid(grid, model.kquad, model.potential))
    ref = disc.evolve(hs.initial_density(grid, cfg.v_star, cfg.width), run.taus)
    scale = hs.weighted_norm(run.taus, run.g0, grid)
    diff = hs.weighted_norm(run.taus, sol.g0 - run.g0, grid)
    remainder = hs.weighted_norm(run.taus, run.g0 - ref, grid)
    rel = diff / scale
    table = Table.from_columns(tau=run.taus, hierarchy_norm=[grid.norm(x) for x in run.g0],
                               ansatz_norm=[grid.norm(x) for x in sol.g0],
                               difference=[grid.norm(a - b) for a, b in zip(sol.g0, run.g0)])
    return CheckResult("ansatz", rel <= rtol,
                       {"relative_difference": rel, "difference_over_fp_gap": diff / remainder,
                        "fp_gap": remainder, "tail_estimate": sol.profile.tail_estimate,
                        "alpha_count": int(len(sol.profile.alpha))},
                       {"ansatz": table})


def energy_check(cache: HierarchyCache, fallback: hs.HierarchyConfig | None = None) -> CheckResult:
    """Energy is non-increasing in every run seen so far (runs one if there are none)."""
    if not cache.runs:
        hierarchy_run_check(fallback or hs.HierarchyConfig(N=25.0), cache)
    rows = []
    for N in sorted(cache.runs):
        run = cache.runs[N]
        rows.append({"N": N, "steps": len(run.taus) - 1, "max_energy_increase": run.max_energy_increase,
                     "tolerance": run.config.energy_tol * float(run.energy[0])})
    ok = all(r["max_energy_increase"] <= r["tolerance"] for r in rows)
    return CheckResult("energy", ok, {"runs": len(rows),
                                      "max_energy_increase": max(r["max_energy_increase"] for r in rows)},
                       {"energy": Table.from_records(rows, ["N", "steps", "max_energy_increase", "tolerance"])})


def refinement_check(cfg: hs.HierarchyConfig, sizes) -> CheckResult:
    res = hs.refinement_study(cfg, sizes)
    rows = [{"n_v": n, "error": e} for n, e in zip(res["sizes"], res["errors"])]
    return CheckResult("refinement", res["plateau"], {"changes": res["changes"]},
                       {"refinement": Table.from_records(rows, ["n_v", "error"])})


def _progress(label: str) -> Callable:
    def report(*args):
        log.debug("%s %s", label, " ".join(f"{a:.6g}" if isinstance(a, float) else str(a) for a in args))
    return report
