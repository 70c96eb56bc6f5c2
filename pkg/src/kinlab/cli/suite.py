"""The thirteen acceptance criteria as runnable checks.

``run_suite`` evaluates a selection, sharing hierarchy runs between the
simulation criteria: the energy criterion inspects every run made by the
convergence and ansatz criteria, so it is evaluated after them.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Callable

from .. import hierarchy_sim as hs
from . import checks
from .checks import CheckResult, HierarchyCache
from .config import defaults

log = logging.getLogger("kinlab")

QUICK = (1, 2, 3, 4, 5, 8, 10)
CONVERGENCE_N = (25.0, 50.0, 100.0, 200.0)


@dataclass(frozen=True)
class Criterion:
    number: int
    title: str
    run: Callable[[HierarchyCache], CheckResult]


def _diagrams(**kw) -> dict:
    return dict(defaults("diagrams"), **kw)


def _resolvent(**kw) -> dict:
    return dict(defaults("resolvent"), **kw)


CRITERIA = (
    Criterion(1, "bad-index bound and tent goodness, length <= 12, m0 <= 4",
              lambda c: checks.audit_check(_diagrams(m0=4, audit_len=12))),
    Criterion(2, "boundary of {(-1), (-1,-1)} and six remainder histories",
              lambda c: checks.boundary_example_check()),
    Criterion(3, "momentum conservation on 10^4 random histories",
              lambda c: checks.momentum_check(_diagrams(m0=4, samples=10_000, sample_len=12, seed=3))),
    Criterion(4, "Landau kernel closed form vs regularised quadrature, d = 3",
              lambda c: checks.kernel_check(defaults("landau"))),
    Criterion(5, "pyramid formula on 1000 random simplices",
              lambda c: checks.pyramid_check(defaults("geometry"))),
    Criterion(6, "integrability threshold classification",
              lambda c: checks.scan_check(defaults("geometry"))),
    Criterion(7, "Airy resolvent scaling exponents",
              lambda c: checks.airy_check(defaults("resolvent"))),
    Criterion(8, "Green-formula resolvent vs direct solve",
              lambda c: checks.green_check(defaults("resolvent"))),
    Criterion(9, "hat operator positivity and creation/annihilation adjointness",
              lambda c: checks.hat_check(defaults("resolvent"))),
    Criterion(10, "contour-deformed velocity average",
              lambda c: checks.contour_check(_resolvent())),
    Criterion(11, "energy non-increasing in every hierarchy run",
              lambda c: checks.energy_check(c)),
    Criterion(12, "kinetic limit: monotone error, fitted rate in [0.7, 1.3]",
              lambda c: checks.convergence_check(hs.HierarchyConfig(), CONVERGENCE_N, c)),
    Criterion(13, "Laplace ansatz vs time-domain hierarchy at N = 100",
              lambda c: checks.ansatz_check(hs.HierarchyConfig(N=100.0), c)),
)

BY_NUMBER = {c.number: c for c in CRITERIA}


@dataclass
class SuiteEntry:
    criterion: Criterion
    result: CheckResult
    seconds: float
    error: str | None = None

    def line(self) -> str:
        verdict = "PASS" if self.result.passed else "FAIL"
        extra = f" ({self.error})" if self.error else ""
        return f"[{verdict}] criterion {self.criterion.number:2d}: {self.criterion.title}{extra}"


def selection(quick: bool = False, only=()) -> list[int]:
    if only:
        unknown = sorted(set(only) - set(BY_NUMBER))
        if unknown:
            raise ValueError(f"unknown criteria {unknown}")
        return sorted(set(only))
    return list(QUICK) if quick else sorted(BY_NUMBER)


def run_criterion(number: int, cache: HierarchyCache | None = None) -> SuiteEntry:
    crit = BY_NUMBER[number]
    cache = HierarchyCache() if cache is None else cache
    start = time.perf_counter()
    try:
        result = crit.run(cache)
        error = None
    except Exception as exc:  # a crashed check is a failed check
        log.exception("criterion %d raised", number)
        result = CheckResult(f"criterion_{number}", False, {"error": f"{type(exc).__name__}: {exc}"})
        error = f"{type(exc).__name__}: {exc}"
    return SuiteEntry(crit, result, time.perf_counter() - start, error)


def run_suite(numbers, on_entry: Callable[[SuiteEntry], None] | None = None) -> list[SuiteEntry]:
    cache = HierarchyCache()
    order = [n for n in numbers if n != 11] + ([11] if 11 in numbers else [])
    entries = {}
    for n in order:
        entries[n] = run_criterion(n, cache)
        if on_entry is not None:
            on_entry(entries[n])
    return [entries[n] for n in sorted(entries)]
