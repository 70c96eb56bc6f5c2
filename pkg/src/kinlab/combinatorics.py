"""Abstracts, histories, wave vectors and the bad-index counting audit.

An abstract is a sequence of +1 (creation) and -1 (annihilation) steps.  A
history decorates every step with the pair of particle labels taking part in
the collision.  Particle 0 is the tagged particle, labels 1..m are the input
background particles and labels above m are created along the way.

Enumeration order is fixed: abstracts by (length, signs) with -1 < +1, and
histories lexicographically in the label choices (a_i, b_i).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from typing import Iterable, Iterator, Sequence

import numpy as np

DEFAULT_HISTORY_CAP = 10**7


class ResourceLimitError(RuntimeError):
    """Raised when an exhaustive enumeration would exceed its configured cap."""


@dataclass(frozen=True, order=True)
class Abstract:
    signs: tuple[int, ...]
    degree: int
    cap: int

    def __post_init__(self):
        if not validate_abstract(self.signs, self.degree, self.cap):
            raise ValueError(
                f"invalid abstract signs={self.signs} degree={self.degree} cap={self.cap}"
            )

    def __len__(self) -> int:
        return len(self.signs)

    @property
    def levels(self) -> tuple[int, ...]:
        """Partial sums m + s_1 + ... + s_j for j = 0..n."""
        out = [self.degree]
        for s in self.signs:
            out.append(out[-1] + s)
        return tuple(out)

    def to_dict(self) -> dict:
        return {"signs": list(self.signs), "degree": self.degree}


def validate_abstract(signs: Sequence[int], m: int, m0: int) -> bool:
    """True iff ``signs`` is an abstract of degree ``m`` under complexity cap ``m0``.

    The empty sequence is not treated as an abstract.
    """
    signs = tuple(signs)
    if not signs or any(s not in (1, -1) for s in signs):
        return False
    if not (0 <= m <= m0):
        return False
    n = len(signs)
    if (n - m) % 2:
        return False
    level = m
    for j, s in enumerate(signs):
        level += s
        if j < n - 1 and not (0 < level <= m0):
            return False
    return level == 0


def abstract_from_signs(signs: Sequence[int], m0: int) -> Abstract:
    """Build an abstract, inferring its degree from the sign sum."""
    return Abstract(tuple(signs), -sum(signs), m0)


def _sort_key(a: Abstract):
    return (len(a.signs), a.signs, a.degree)


def enumerate_abstracts(m: int, m0: int, max_len: int) -> list[Abstract]:
    """All abstracts of degree ``m``, cap ``m0`` and length at most ``max_len``."""
    if m < 0 or m > m0 or max_len < 1:
        return []
    found: list[Abstract] = []

    def extend(prefix: list[int], level: int):
        n = len(prefix)
        if n and level == 0:
            if (n - m) % 2 == 0:
                found.append(Abstract(tuple(prefix), m, m0))
            return
        if n and not (0 < level <= m0):
            return
        # the remaining steps must be able to bring the level down to zero
        if n + level > max_len:
            return
        for s in (-1, 1):
            prefix.append(s)
            extend(prefix, level + s)
            prefix.pop()

    extend([], m)
    found.sort(key=_sort_key)
    return found


def all_abstracts(m0: int, max_len: int) -> list[Abstract]:
    out: list[Abstract] = []
    for m in range(m0 + 1):
        out.extend(enumerate_abstracts(m, m0, max_len))
    out.sort(key=_sort_key)
    return out


def _prepend_down(a: Abstract) -> Abstract | None:
    signs = (-1,) + a.signs
    if validate_abstract(signs, a.degree + 1, a.cap):
        return Abstract(signs, a.degree + 1, a.cap)
    return None


def _drop_head(a: Abstract) -> Abstract | None:
    if len(a.signs) <= 1:
        return None
    return Abstract(a.signs[1:], a.degree + a.signs[0], a.cap)


def is_admissible(omega: Iterable[Abstract], m0: int) -> bool:
    """Closed under removing the first step and under prepending -1.

    Prepending is only required when the result is again an abstract of
    degree at most ``m0``; the empty tail of a length-one abstract is ignored.
    """
    omega = set(omega)
    for a in omega:
        if a.cap != m0:
            return False
        tail = _drop_head(a)
        if tail is not None and tail not in omega:
            return False
        up = _prepend_down(a)
        if up is not None and up not in omega:
            return False
    return True


def admissible_closure(m0: int, K: int, seed: Iterable[Abstract] | None = None) -> list[Abstract]:
    """Smallest admissible set containing every abstract of length <= K (plus ``seed``)."""
    pending = list(all_abstracts(m0, K)) if K >= 1 else []
    if seed is not None:
        pending.extend(seed)
    omega: set[Abstract] = set()
    while pending:
        a = pending.pop()
        if a in omega:
            continue
        omega.add(a)
        for b in (_drop_head(a), _prepend_down(a)):
            if b is not None and b not in omega:
                pending.append(b)
    return sorted(omega, key=_sort_key)


def boundary_by_degree(omega: Iterable[Abstract], m0: int) -> dict[int, list[Abstract]]:
    omega = list(omega)
    if not is_admissible(omega, m0):
        raise ValueError("boundary requires an admissible set")
    members = set(omega)
    out: dict[int, list[Abstract]] = {m: [] for m in range(m0)}
    for a in omega:
        m = a.degree - 1
        if m < 0:
            continue
        signs = (1,) + a.signs
        if not validate_abstract(signs, m, m0):
            continue
        cand = Abstract(signs, m, m0)
        if cand not in members:
            out[m].append(cand)
    for m in out:
        out[m].sort(key=_sort_key)
    return out


def boundary(omega: Iterable[Abstract], m0: int) -> list[Abstract]:
    parts = boundary_by_degree(omega, m0)
    return sorted((a for lst in parts.values() for a in lst), key=_sort_key)


# ---------------------------------------------------------------- histories


@dataclass(frozen=True)
class History:
    abstract: Abstract
    collisions: tuple[tuple[int, int, int], ...]
    alive_sets: tuple[frozenset, ...] = field(compare=False)

    @property
    def n(self) -> int:
        return len(self.collisions)


def _history_choices(a: Abstract, i: int, alive: Sequence[int], next_label: int,
                     previous: tuple[int, int, int] | None):
    s = a.signs[i]
    if s == 1:
        for lab in alive:
            yield (lab, next_label)
        return
    for lab in alive:
        for other in alive:
            if other == lab or other == 0:
                continue
            if previous is not None and previous[0] == 1 and previous[1:] == (lab, other):
                continue
            yield (lab, other)


def iter_histories(a: Abstract) -> Iterator[History]:
    """Yield every history of ``a`` in lexicographic label order."""
    m = a.degree
    n = len(a.signs)
    collisions: list[tuple[int, int, int]] = []
    alive_sets: list[frozenset] = [frozenset(range(m + 1))]

    def rec(i: int, next_label: int):
        if i == n:
            yield History(a, tuple(collisions), tuple(alive_sets))
            return
        alive = sorted(alive_sets[-1])
        previous = collisions[-1] if collisions else None
        s = a.signs[i]
        for lab, other in _history_choices(a, i, alive, next_label, previous):
            collisions.append((s, lab, other))
            if s == 1:
                alive_sets.append(alive_sets[-1] | {other})
                yield from rec(i + 1, next_label + 1)
            else:
                alive_sets.append(alive_sets[-1] - {other})
                yield from rec(i + 1, next_label)
            collisions.pop()
            alive_sets.pop()

    yield from rec(0, m + 1)


def enumerate_histories(a: Abstract, cap: int = DEFAULT_HISTORY_CAP) -> list[History]:
    if count_histories(a) > cap:
        raise ResourceLimitError(f"{count_histories(a)} histories for {a.signs} exceed cap {cap}")
    return list(iter_histories(a))


def count_histories(a: Abstract) -> int:
    """Closed-form history count.

    A creation offers #omega choices; an annihilation offers (#omega - 1)**2,
    less one when it directly follows a creation (the repeated pair is excluded).
    """
    size = a.degree + 1
    total = 1
    prev = 0
    for s in a.signs:
        if s == 1:
            total *= size
            size += 1
        else:
            total *= (size - 1) ** 2 - (1 if prev == 1 else 0)
            size -= 1
        prev = s
        if total == 0:
            return 0
    return total


def random_history(a: Abstract, rng: np.random.Generator, max_tries: int = 1000) -> History:
    """Sample a history of ``a`` by uniform local choices, restarting on dead ends."""
    if count_histories(a) == 0:
        raise ValueError(f"abstract {a.signs} has no histories")
    m = a.degree
    for _ in range(max_tries):
        collisions: list[tuple[int, int, int]] = []
        alive_sets = [frozenset(range(m + 1))]
        next_label = m + 1
        ok = True
        for i, s in enumerate(a.signs):
            alive = sorted(alive_sets[-1])
            previous = collisions[-1] if collisions else None
            choices = list(_history_choices(a, i, alive, next_label, previous))
            if not choices:
                ok = False
                break
            lab, other = choices[rng.integers(len(choices))]
            collisions.append((s, lab, other))
            if s == 1:
                alive_sets.append(alive_sets[-1] | {other})
                next_label += 1
            else:
                alive_sets.append(alive_sets[-1] - {other})
        if ok:
            return History(a, tuple(collisions), tuple(alive_sets))
    raise RuntimeError(f"could not sample a history of {a.signs}")


# ------------------------------------------------------------- wave vectors


@dataclass(frozen=True)
class WaveVectorTable:
    """Signed coefficients of every particle wave vector in the momentum basis.

    ``coeffs[i, j, l-1]`` is the coefficient of momentum k_l in q_j after step i.
    Momenta 1..m are the inputs; fresh momenta m+1, m+2, ... follow creation order,
    so the fresh momentum of a creation carries the label of the created particle.
    """
    S: int
    degree: int
    coeffs: np.ndarray

    def row_sums(self) -> np.ndarray:
        return self.coeffs.sum(axis=1)

    def check(self) -> bool:
        c = self.coeffs
        if not np.isin(c, (-1, 0, 1)).all():
            return False
        if np.any(c.sum(axis=1) != 0):
            return False
        nz = (c != 0).sum(axis=1)
        if not np.isin(nz, (0, 2)).all():
            return False
        # when two slots carry a momentum their signs must be opposite
        pos = (c == 1).sum(axis=1)
        neg = (c == -1).sum(axis=1)
        return bool(np.all(pos == neg))


def wave_vector_table(h: History) -> WaveVectorTable:
    a = h.abstract
    m = a.degree
    n = len(a.signs)
    S = (n + m) // 2
    coeffs = np.zeros((n + 1, S + 1, S), dtype=np.int8)
    q = np.zeros((S + 1, S), dtype=np.int8)
    for ell in range(1, m + 1):
        q[0, ell - 1] = -1
        q[ell, ell - 1] = 1
    coeffs[0] = q
    for i, (s, lab, other) in enumerate(h.collisions, start=1):
        if s == 1:
            fresh = other - 1  # fresh momentum index equals the created label
            q[lab, fresh] -= 1
            q[other, :] = 0
            q[other, fresh] = 1
        else:
            q[lab] += q[other]
            q[other] = 0
        coeffs[i] = q
    return WaveVectorTable(S, m, coeffs)


def varpi_sequence(h: History, table: WaveVectorTable | None = None) -> tuple[int, ...]:
    """Good-index indicator for steps 1..n-1 (the last step is left undefined)."""
    if table is None:
        table = wave_vector_table(h)
    m = h.abstract.degree
    n = h.n
    out = []
    for i in range(1, n):
        if any(lab > m for lab in h.alive_sets[i]):
            out.append(1)
            continue
        modified = table.coeffs[i, 1:m + 1, m:]
        out.append(1 if np.any(modified != 0) else 0)
    return tuple(out)


# -------------------------------------------------------------------- tents


@dataclass(frozen=True)
class TentDecomposition:
    tents: tuple[tuple[int, int, int], ...]  # (alpha, beta, type), 1-based inclusive
    down_steps: tuple[int, ...]

    def interior(self) -> frozenset:
        """Positions alpha <= i < beta of every tent."""
        return frozenset(i for al, be, _ in self.tents for i in range(al, be))


def _tent_end(signs: Sequence[int], p: int) -> int:
    """End position (0-based, inclusive) of the tent starting at ``p``."""
    n = len(signs)
    if signs[p] != 1 or p + 1 >= n:
        raise ValueError(f"no tent starts at position {p + 1}")
    if signs[p + 1] == 1:
        level = 0
        for q in range(p, n):
            level += signs[q]
            if level == 0:
                return q
        raise ValueError("excursion does not return")
    if p + 2 >= n:
        raise ValueError("(1,-1) alone is not a tent")
    if signs[p + 2] == -1:
        return p + 2
    return _tent_end(signs, p + 2)


def tent_decomposition(a: Abstract | Sequence[int]) -> TentDecomposition:
    signs = a.signs if isinstance(a, Abstract) else tuple(a)
    tents = []
    downs = []
    p = 0
    while p < len(signs):
        if signs[p] == -1:
            downs.append(p + 1)
            p += 1
            continue
        end = _tent_end(signs, p)
        total = sum(signs[p:end + 1])
        tents.append((p + 1, end + 1, 0 if total == 0 else 1))
        p = end + 1
    return TentDecomposition(tuple(tents), tuple(downs))


def bad_bound_holds(bad: int, n: int, m: int) -> bool:
    """#bad <= n/4 + 3m/4, in integers."""
    return 4 * bad <= n + 3 * m


# -------------------------------------------------------------------- audit


@dataclass
class AuditRecord:
    abstract: Abstract
    histories: int
    max_bad: int | None
    bound: Fraction
    tent_violation: bool

    @property
    def ok(self) -> bool:
        bound_ok = self.max_bad is None or bad_bound_holds(self.max_bad, len(self.abstract), self.abstract.degree)
        return bound_ok and not self.tent_violation


@dataclass
class AuditReport:
    m0: int
    n_max: int
    engine: str
    records: list[AuditRecord]

    @property
    def total_histories(self) -> int:
        return sum(r.histories for r in self.records)

    @property
    def violations(self) -> list[AuditRecord]:
        return [r for r in self.records if not r.ok]

    @property
    def passed(self) -> bool:
        return not self.violations


def _audit_enumerate(a: Abstract, interior: frozenset) -> AuditRecord:
    max_bad = None
    viol = False
    count = 0
    for h in iter_histories(a):
        count += 1
        varpi = varpi_sequence(h)
        bad = sum(1 for v in varpi if v == 0)
        max_bad = bad if max_bad is None else max(max_bad, bad)
        if any(varpi[i - 1] == 0 for i in interior if i < len(a.signs)):
            viol = True
    n, m = len(a.signs), a.degree
    return AuditRecord(a, count, max_bad, Fraction(n + 3 * m, 4), viol)


# Compressed engine.  Only three things about the labelled past matter for
# future good-index flags: which alive particles are tagged / input / created,
# which alive pairs share a fresh momentum (input momenta never enter the
# flag), and the pair of the previous step if it was a creation.  Labels
# inside a class are interchangeable, so states are canonicalised by
# permuting within classes.

_TAG, _INPUT, _FRESH = 0, 1, 2


def _canonical(classes: tuple[int, ...], edges: tuple[tuple[int, int], ...],
               last: tuple[int, int] | None):
    nodes = range(len(classes))
    inputs = [v for v in nodes if classes[v] == _INPUT]
    fresh = [v for v in nodes if classes[v] == _FRESH]
    best = None
    for p_in in itertools.permutations(inputs):
        for p_fr in itertools.permutations(fresh):
            order = [0] + list(p_in) + list(p_fr)
            relabel = {old: new for new, old in enumerate(order)}
            e = tuple(sorted(tuple(sorted((relabel[x], relabel[y]))) for x, y in edges))
            la = None if last is None else (relabel[last[0]], relabel[last[1]])
            key = (e, la)
            if best is None or key < best[0]:
                best = (key, order)
    order = best[1]
    new_classes = tuple(classes[v] for v in order)
    return (new_classes,) + best[0]


def _good(classes, edges) -> bool:
    if _FRESH in classes:
        return True
    return any(classes[x] == _INPUT or classes[y] == _INPUT for x, y in edges)


@lru_cache(maxsize=None)
def _suffix(signs: tuple[int, ...], interior: tuple[bool, ...], state) -> tuple[int, int, bool]:
    """(count, max bad, tent violation) over all completions of ``signs``.

    ``interior[i]`` flags whether step i of the suffix is a tent interior
    position; the good-index flag is evaluated after every step except the last.
    """
    classes, edges, last = state
    if not signs:
        return 1, 0, False
    s = signs[0]
    final = len(signs) == 1
    alive = range(len(classes))
    count = 0
    max_bad = -1
    viol = False
    for a in alive:
        if s == 1:
            b = len(classes)
            ncls = classes + (_FRESH,)
            nedges = edges + ((a, b),)
            nlast = (a, b)
        else:
            for b in alive:
                if b == a or b == 0:
                    continue
                if last is not None and last == (a, b):
                    continue
                moved = []
                for x, y in edges:
                    if {x, y} == {a, b}:
                        continue
                    x = a if x == b else x
                    y = a if y == b else y
                    moved.append((x, y))
                keep = [v for v in alive if v != b]
                idx = {v: i for i, v in enumerate(keep)}
                ncls = tuple(classes[v] for v in keep)
                nedges = tuple((idx[x], idx[y]) for x, y in moved)
                c, mb, vi = _step(signs, interior, final, ncls, nedges, None)
                if c:
                    count += c
                    max_bad = max(max_bad, mb)
                    viol = viol or vi
            continue
        c, mb, vi = _step(signs, interior, final, ncls, nedges, nlast)
        if c:
            count += c
            max_bad = max(max_bad, mb)
            viol = viol or vi
    return count, max_bad, viol


def _step(signs, interior, final, ncls, nedges, nlast):
    bad = 0
    viol = False
    if not final:
        good = _good(ncls, nedges)
        bad = 0 if good else 1
        viol = bool(interior[0]) and not good
    nstate = _canonical(ncls, nedges, nlast)
    c, mb, vi = _suffix(signs[1:], interior[1:], nstate)
    if c == 0:
        return 0, -1, False
    return c, mb + bad, vi or viol


def _audit_compressed(a: Abstract, interior: frozenset) -> AuditRecord:
    m = a.degree
    classes = (_TAG,) + (_INPUT,) * m
    flags = tuple((i + 1) in interior for i in range(len(a.signs)))
    count, max_bad, viol = _suffix(a.signs, flags, _canonical(classes, (), None))
    n = len(a.signs)
    return AuditRecord(a, count, max_bad if count else None, Fraction(n + 3 * m, 4), viol)


def audit_abstracts(abstracts: Iterable[Abstract], engine: str = "compressed",
                    cap: int = DEFAULT_HISTORY_CAP) -> list[AuditRecord]:
    abstracts = list(abstracts)
    if engine == "enumerate":
        total = sum(count_histories(a) for a in abstracts)
        if total > cap:
            raise ResourceLimitError(f"{total} histories exceed the audit cap {cap}")
        run = _audit_enumerate
    elif engine == "compressed":
        run = _audit_compressed
    else:
        raise ValueError(f"unknown audit engine {engine!r}")
    records = []
    for a in abstracts:
        if count_histories(a) == 0:
            n, m = len(a.signs), a.degree
            records.append(AuditRecord(a, 0, None, Fraction(n + 3 * m, 4), False))
            continue
        records.append(run(a, tent_decomposition(a).interior()))
    return records


def bad_index_audit(m0: int, n_max: int, engine: str = "compressed",
                    cap: int = DEFAULT_HISTORY_CAP) -> AuditReport:
    """Check the bad-index bound and tent-interior goodness for every history
    of every abstract with s_1 = +1, degree <= m0 and length <= n_max."""
    abstracts = [a for a in all_abstracts(m0, n_max) if a.signs[0] == 1]
    records = audit_abstracts(abstracts, engine=engine, cap=cap)
    return AuditReport(m0, n_max, engine, records)


# --------------------------------------------------------- remainder catalog


@dataclass(frozen=True)
class CatalogEntry:
    degree: int
    signs: tuple[int, ...]
    length: int
    tN_power: int
    N_power: Fraction
    i_power: int
    sign: int
    histories: int
    kind: str

    def to_dict(self) -> dict:
        return {
            "degree": self.degree,
            "signs": list(self.signs),
            "length": self.length,
            "tN_power": self.tN_power,
            "N_power": str(self.N_power),
            "i_power": self.i_power,
            "sign": self.sign,
            "histories": self.histories,
            "kind": self.kind,
        }


def remainder_catalog(omega: Iterable[Abstract], m0: int) -> list[CatalogEntry]:
    """Remainder terms of the approximate hierarchy built on ``omega``.

    Degree m >= 1 terms are indexed by the boundary abstracts of degree m with
    prefactor i t_N N^{-3/2} (i/sqrt N)^{n-3}.  The degree-0 term collects the
    degree-1 abstracts of length >= 3 with prefactor -t_N N^{-2} (i/sqrt N)^{n-3},
    plus two fixed diagrams when m0 >= 2.
    """
    omega = list(omega)
    if not omega:
        return []
    parts = boundary_by_degree(omega, m0)
    out: list[CatalogEntry] = []
    for a in sorted((a for a in omega if a.degree == 1 and len(a.signs) >= 3), key=_sort_key):
        n = len(a.signs)
        out.append(CatalogEntry(0, a.signs, n, 1, Fraction(-2) - Fraction(n - 3, 2), n - 3, -1,
                                count_histories(a), "interior"))
    if m0 >= 2:
        for tag in ("fixed-1", "fixed-2"):
            out.append(CatalogEntry(0, (), 0, 1, Fraction(-2), 0, 1, 1, tag))
    for m in range(1, m0):
        for a in parts.get(m, []):
            n = len(a.signs)
            if n < 3:
                continue
            out.append(CatalogEntry(m, a.signs, n, 1, Fraction(-3, 2) - Fraction(n - 3, 2), 1 + (n - 3), 1,
                                    count_histories(a), "boundary"))
    return out
