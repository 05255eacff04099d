"""Brute-force checks of joint-shift assumptions on finite domains.

A pair of joint tables ``p[x, y]`` (source, target) is enough to decide
covariate shift, label shift, factorizable joint shift, and, by
enumerating every partition of the x-values, domain invariance and
generalized label shift.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import entr

TOL = 1e-9
MAX_PARTITION_NX = 8
ASSUMPTIONS = ("CS", "LS", "DI", "GLS", "FJS")


class SupportViolation(ValueError):
    """Target puts mass where the source has none."""


class NotFactorizable(ValueError):
    pass


class AmbiguousSupport(ValueError):
    """The support graph is disconnected, so the factors are not unique.

    ``factors`` holds one valid factorization (each component gauged
    separately).
    """

    def __init__(self, msg, factors=None):
        super().__init__(msg)
        self.factors = factors


class SizeLimit(ValueError):
    pass


class CounterexampleFound(AssertionError):
    def __init__(self, msg, source=None, target=None):
        super().__init__(msg)
        self.source = source
        self.target = target


@dataclass(frozen=True)
class DiscreteJoint:
    p: np.ndarray

    def __post_init__(self):
        p = np.array(self.p, dtype=float)
        if p.ndim != 2 or p.shape[0] < 1 or p.shape[1] < 1:
            raise ValueError(f"joint table must be a non-empty 2-d array, got shape {p.shape}")
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise ValueError("joint table entries must be finite and nonnegative")
        if abs(p.sum() - 1.0) > 1e-12:
            raise ValueError(f"joint table must sum to 1, sums to {p.sum()!r}")
        p.setflags(write=False)
        object.__setattr__(self, "p", p)

    @classmethod
    def from_weights(cls, weights) -> "DiscreteJoint":
        w = np.asarray(weights, dtype=float)
        return cls(w / w.sum())

    @property
    def nx(self) -> int:
        return self.p.shape[0]

    @property
    def ny(self) -> int:
        return self.p.shape[1]

    @property
    def support(self) -> np.ndarray:
        return self.p > 0

    def px(self) -> np.ndarray:
        return self.p.sum(axis=1)

    def py(self) -> np.ndarray:
        return self.p.sum(axis=0)


@dataclass(frozen=True)
class ImportanceTable:
    """Joint importance on the source support; NaN off the support."""

    w: np.ndarray
    support: np.ndarray

    def mass_balance(self, source: DiscreteJoint) -> float:
        return float(np.sum(source.p[self.support] * self.w[self.support]))


@dataclass(frozen=True)
class FactorPair:
    """u over x-values, v over y-values; NaN where a value is off the support."""

    u: np.ndarray
    v: np.ndarray

    def table(self) -> np.ndarray:
        return np.outer(self.u, self.v)


@dataclass
class VerifierReport:
    trials: int
    failures: int
    seed: int
    elapsed_ms: float
    counterexamples: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "trials": self.trials,
            "failures": self.failures,
            "seed": self.seed,
            "elapsed_ms": self.elapsed_ms,
        }


def joint_importance(source: DiscreteJoint, target: DiscreteJoint) -> ImportanceTable:
    if source.p.shape != target.p.shape:
        raise ValueError(f"shape mismatch {source.p.shape} vs {target.p.shape}")
    sup = source.support
    leak = (~sup) & target.support
    if leak.any():
        i, j = np.argwhere(leak)[0]
        raise SupportViolation(f"target has mass {target.p[i, j]!r} at ({i}, {j}) outside source support")
    w = np.full(source.p.shape, np.nan)
    w[sup] = target.p[sup] / source.p[sup]
    return ImportanceTable(w, sup)


def _components(edges: np.ndarray, rows):
    """Connected components of the bipartite graph given by a boolean mask."""
    seen_r, seen_c, comps = set(), set(), []
    for r0 in rows:
        if r0 in seen_r:
            continue
        comp_r, comp_c, stack = {r0}, set(), [("r", r0)]
        seen_r.add(r0)
        while stack:
            kind, k = stack.pop()
            if kind == "r":
                for c in np.flatnonzero(edges[k]):
                    if c not in seen_c:
                        seen_c.add(c)
                        comp_c.add(c)
                        stack.append(("c", c))
            else:
                for r in np.flatnonzero(edges[:, k]):
                    if r not in seen_r:
                        seen_r.add(r)
                        comp_r.add(r)
                        stack.append(("r", r))
        comps.append((sorted(comp_r), sorted(comp_c)))
    return comps


def factorize(w: ImportanceTable, tol: float = TOL) -> FactorPair:
    """Rank-one factorization of ``w`` on its support, u at the first support x fixed to 1.

    Rows (columns) that vanish on the whole support get a zero factor.
    Raises NotFactorizable when no nonnegative rank-one fit exists, and
    AmbiguousSupport when it exists but the support graph is disconnected.
    """
    sup = np.asarray(w.support, dtype=bool)
    W = np.where(sup, w.w, 0.0)
    nx, ny = W.shape
    sup_rows = np.flatnonzero(sup.any(axis=1))
    sup_cols = np.flatnonzero(sup.any(axis=0))
    if sup_rows.size == 0:
        raise NotFactorizable("empty support")

    zero_row = np.zeros(nx, bool)
    zero_col = np.zeros(ny, bool)
    zero_row[sup_rows] = ~(W[sup_rows] > 0).any(axis=1)
    zero_col[sup_cols] = ~(W[:, sup_cols] > 0).any(axis=0)
    live = sup & ~zero_row[:, None] & ~zero_col[None, :]
    if np.any(live & ~(W > 0)):
        i, j = np.argwhere(live & ~(W > 0))[0]
        raise NotFactorizable(f"zero weight at ({i}, {j}) inside a positive row and column")

    u = np.full(nx, np.nan)
    v = np.full(ny, np.nan)
    u[zero_row] = 0.0
    v[zero_col] = 0.0

    live_rows = [r for r in sup_rows if not zero_row[r]]
    logw = np.log(np.where(live, W, 1.0))
    comps = _components(live, live_rows)
    for comp_rows, _ in comps:
        lu = {comp_rows[0]: 0.0}
        lv = {}
        frontier = [comp_rows[0]]
        while frontier:
            nxt = []
            for r in frontier:
                for c in np.flatnonzero(live[r]):
                    if c not in lv:
                        lv[c] = logw[r, c] - lu[r]
                        for r2 in np.flatnonzero(live[:, c]):
                            if r2 not in lu:
                                lu[r2] = logw[r2, c] - lv[c]
                                nxt.append(r2)
            frontier = nxt
        for r, val in lu.items():
            u[r] = math.exp(val)
        for c, val in lv.items():
            v[c] = math.exp(val)
        for r in lu:
            cs = np.flatnonzero(live[r])
            resid = logw[r, cs] - lu[r] - np.array([lv[c] for c in cs])
            if np.max(np.abs(resid)) > tol:
                raise NotFactorizable(
                    f"log-consistency fails at row {r}: max residual {np.max(np.abs(resid)):.3g}"
                )

    # each component is rooted at its smallest row with log u = 0, so the
    # first support x already carries u = 1
    pair = FactorPair(u, v)
    if len(comps) > 1:
        raise AmbiguousSupport(f"support graph has {len(comps)} components", pair)
    return pair


# ------------------------------------------------------- assumption checks


def _conditional_rows(p: np.ndarray):
    """Return p(y|x) for rows with p(x) > 0, and the mask of such rows."""
    px = p.sum(axis=1)
    ok = px > 0
    cond = np.zeros_like(p)
    cond[ok] = p[ok] / px[ok, None]
    return cond, ok


def _covariate_shift(ps: np.ndarray, pt: np.ndarray, tol: float) -> bool:
    cs, oks = _conditional_rows(ps)
    ct, okt = _conditional_rows(pt)
    both = oks & okt
    return bool(np.all(np.abs(cs[both] - ct[both]) <= tol))


def set_partitions(n: int):
    """All set partitions of range(n) as restricted-growth label tuples."""
    if n == 0:
        yield ()
        return
    labels = [0] * n

    def rec(i, m):
        if i == n:
            yield tuple(labels)
            return
        for k in range(m + 1):
            labels[i] = k
            yield from rec(i + 1, max(m, k + 1))

    yield from rec(1, 1)


def _group(p: np.ndarray, labels: np.ndarray, ncells: int) -> np.ndarray:
    out = np.zeros((ncells, p.shape[1]))
    np.add.at(out, labels, p)
    return out


def _preserves_label_info(p: np.ndarray, labels: np.ndarray, pz: np.ndarray, tol: float) -> bool:
    cond_x, okx = _conditional_rows(p)
    cond_z, _ = _conditional_rows(pz)
    return bool(np.all(np.abs(cond_x[okx] - cond_z[labels[okx]]) <= tol))


def _label_conditional_match(pzs: np.ndarray, pzt: np.ndarray, tol: float) -> bool:
    ys, yt = pzs.sum(axis=0), pzt.sum(axis=0)
    both = (ys > 0) & (yt > 0)
    a = pzs[:, both] / ys[both]
    b = pzt[:, both] / yt[both]
    return bool(np.all(np.abs(a - b) <= tol))


def assumption_witnesses(source: DiscreteJoint, target: DiscreteJoint, which: str,
                         tol: float = TOL, first_only: bool = False) -> list[tuple[int, ...]]:
    """Every partition of the x-values that witnesses DI or GLS.

    A partition is given as a tuple of cell labels, one per x-value.
    """
    if which not in ("DI", "GLS"):
        raise ValueError(f"witnesses exist only for DI and GLS, not {which!r}")
    if source.nx > MAX_PARTITION_NX:
        raise SizeLimit(f"nx = {source.nx} exceeds the enumeration bound {MAX_PARTITION_NX}")
    joint_importance(source, target)
    ps, pt = source.p, target.p
    found = []
    for labels in set_partitions(source.nx):
        g = np.asarray(labels, dtype=int)
        ncell = int(g.max()) + 1
        pzs, pzt = _group(ps, g, ncell), _group(pt, g, ncell)
        if not (_preserves_label_info(ps, g, pzs, tol) and _preserves_label_info(pt, g, pzt, tol)):
            continue
        if which == "DI":
            ok = bool(np.all(np.abs(pzs - pzt) <= tol))
        else:
            ok = _label_conditional_match(pzs, pzt, tol)
        if ok:
            found.append(labels)
            if first_only:
                break
    return found


def check_assumption(source: DiscreteJoint, target: DiscreteJoint, which: str,
                     tol: float = TOL) -> bool:
    which = which.upper()
    if which not in ASSUMPTIONS:
        raise ValueError(f"unknown assumption {which!r}; expected one of {ASSUMPTIONS}")
    w = joint_importance(source, target)
    if which == "CS":
        return _covariate_shift(source.p, target.p, tol)
    if which == "LS":
        return _covariate_shift(source.p.T, target.p.T, tol)
    if which == "FJS":
        try:
            factorize(w)
        except AmbiguousSupport:
            return True
        except NotFactorizable:
            return False
        return True
    return bool(assumption_witnesses(source, target, which, tol, first_only=True))


# ---------------------------------------------------- random instances


def random_simplex(rng: np.random.Generator, n: int, sparsify: bool = False) -> np.ndarray:
    p = rng.dirichlet(np.ones(n))
    if sparsify:
        small = p < 1e-3
        if small.all():
            small[np.argmax(p)] = False
        p = np.where(small, 0.0, p)
    return p / p.sum()


def _trial_rng(seed: int, trial: int) -> np.random.Generator:
    return np.random.default_rng([seed, trial])


def _deterministic_source(rng, nx, ny, sparsify):
    f = rng.integers(0, ny, size=nx)
    px = random_simplex(rng, nx, sparsify)
    ps = np.zeros((nx, ny))
    ps[np.arange(nx), f] = px
    return f, ps


def invariance_instance(rng, nx: int, ny: int, matched_labels: bool = True, sparsify: bool = False):
    """Deterministic labeling, covariate shift by construction.

    With ``matched_labels`` the target keeps each label's source mass and
    only redistributes it among the x-values of that label.
    """
    f, ps = _deterministic_source(rng, nx, ny, sparsify)
    px = ps.sum(axis=1)
    if matched_labels:
        qx = np.zeros(nx)
        for y in range(ny):
            members = np.flatnonzero((f == y) & (px > 0))
            if members.size:
                qx[members] = px[members].sum() * rng.dirichlet(np.ones(members.size))
    else:
        qx = np.zeros(nx)
        live = np.flatnonzero(px > 0)
        qx[live] = rng.dirichlet(np.ones(live.size))
    pt = np.zeros((nx, ny))
    pt[np.arange(nx), f] = qx
    return DiscreteJoint(ps / ps.sum()), DiscreteJoint(pt / pt.sum())


def fjs_target(ps: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    pt = ps * np.outer(u, v)
    return pt / pt.sum()


def factorizable_instance(rng, nx: int, ny: int, deterministic: bool = True, sparsify: bool = False):
    """FJS by construction: target = source reweighted by random positive u(x)v(y)."""
    if deterministic:
        _, ps = _deterministic_source(rng, nx, ny, sparsify)
    else:
        ps = random_simplex(rng, nx * ny, sparsify).reshape(nx, ny)
    u = np.exp(rng.normal(size=nx))
    v = np.exp(rng.normal(size=ny))
    return DiscreteJoint(ps / ps.sum()), DiscreteJoint(fjs_target(ps, u, v))


def _run_trials(make, premise, conclusion, trials, seed, raise_on_failure, name):
    if trials < 1:
        raise ValueError("trials must be >= 1")
    t0 = time.perf_counter()
    failures, bad = 0, []
    for t in range(trials):
        s, q = make(_trial_rng(seed, t))
        if not premise(s, q):
            raise CounterexampleFound(f"{name}: generator broke its own premise at trial {t}", s, q)
        if not conclusion(s, q):
            failures += 1
            if len(bad) < 10:
                bad.append((s, q))
            if raise_on_failure:
                raise CounterexampleFound(f"{name}: conclusion fails at trial {t}", s, q)
    return VerifierReport(trials, failures, seed, (time.perf_counter() - t0) * 1e3, bad)


def _sizes(rng, nx, ny, max_nx):
    a = nx if nx is not None else int(rng.integers(1, max_nx + 1))
    b = ny if ny is not None else int(rng.integers(1, 4))
    return a, b


def verify_theorem_1(trials: int = 1000, seed: int = 0, nx: int | None = None, ny: int | None = None,
                     matched_labels: bool = True, sparsify: bool = True, max_nx: int = 5,
                     raise_on_failure: bool | None = None) -> VerifierReport:
    """Determinacy + matched label marginals + CS implies DI.

    With ``matched_labels=False`` the label premise is dropped and the
    report counts DI-false instances instead of raising.
    """
    if raise_on_failure is None:
        raise_on_failure = matched_labels

    def make(rng):
        a, b = _sizes(rng, nx, ny, max_nx)
        return invariance_instance(rng, a, b, matched_labels, sparsify and rng.random() < 0.5)

    return _run_trials(
        make,
        lambda s, q: check_assumption(s, q, "CS"),
        lambda s, q: check_assumption(s, q, "DI"),
        trials, seed, raise_on_failure, "covariate shift => invariance",
    )


def verify_theorem_2(trials: int = 1000, seed: int = 0, nx: int | None = None, ny: int | None = None,
                     deterministic: bool = True, sparsify: bool = True, max_nx: int = 5,
                     raise_on_failure: bool | None = None) -> VerifierReport:
    """Determinacy + FJS implies GLS; ``deterministic=False`` is the negative control."""
    if raise_on_failure is None:
        raise_on_failure = deterministic

    def make(rng):
        a, b = _sizes(rng, nx, ny, max_nx)
        if not deterministic:
            b = max(b, 2)
        return factorizable_instance(rng, a, b, deterministic, sparsify and rng.random() < 0.5)

    return _run_trials(
        make,
        lambda s, q: check_assumption(s, q, "FJS"),
        lambda s, q: check_assumption(s, q, "GLS"),
        trials, seed, raise_on_failure, "factorizable shift => GLS",
    )


# ------------------------------------------------- discriminator optimum


def entropy(p) -> float:
    return float(np.sum(entr(np.asarray(p, dtype=float))))


def jsd(p, q) -> float:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    return entropy(0.5 * (p + q)) - 0.5 * (entropy(p) + entropy(q))


def discriminator_objective(p, q, w) -> float:
    """E_p log(1 + w) + E_q log(1 + 1/w), skipping zero-probability terms."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    w = np.asarray(w, dtype=float)
    a = p > 0
    b = q > 0
    return float(np.sum(p[a] * np.log1p(w[a])) + np.sum(q[b] * np.log1p(1.0 / w[b])))


def lemma1_value(p, q):
    """Optimal density-ratio weights q/p and the attained objective value."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValueError("p and q must have the same shape")
    if np.any((p <= 0) & (q > 0)):
        raise SupportViolation("q has mass outside the support of p")
    w = np.zeros_like(p)
    np.divide(q, p, out=w, where=p > 0)
    return w, discriminator_objective(p, q, w)


def jsd_bound(p, q) -> float:
    return 2.0 * (math.log(2.0) - jsd(p, q))
