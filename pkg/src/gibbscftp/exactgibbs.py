"""Brute-force exact conditional Gibbs computations on desk-scale regions.

Everything here enumerates: feasible configurations, feasible boundary
conditions, conditional distributions, total-variation distances, the
coincidence functional gamma(V, U), and the three sufficient one-site
conditions (high noise, Dobrushin uniqueness, disagreement percolation).
Capacity limits are hard errors, never silent approximation.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .lattice import LatticeGraph, Region, ball, boundary, dist, region, sphere_count
from .model import BoundaryCondition, Spec

BOUNDARY_CAP = 2 ** 22
INTERIOR_CAP = 2 ** 24

# math.fsum is used for normalization sums on larger regions; float64
# accumulation is fine below this size and measurably faster.
FSUM_THRESHOLD = 12


class CapacityError(Exception):
    """Enumeration would exceed the configured exhaustion limit."""


class InfeasibleBoundaryError(Exception):
    """The boundary condition admits no feasible interior extension."""


@dataclass(frozen=True)
class Pmf:
    """Exact pmf over configurations (tuples of symbol indices) on a region."""

    region: Region
    support: tuple
    probs: tuple

    def __post_init__(self):
        sup = tuple(map(tuple, self.support))
        pr = tuple(float(p) for p in self.probs)
        if len(sup) != len(pr):
            raise ValueError("support and probs lengths differ")
        if len(set(sup)) != len(sup):
            raise ValueError("support entries must be distinct")
        if any(p < 0 for p in pr):
            raise ValueError("probabilities must be non-negative")
        if abs(math.fsum(pr) - 1.0) > 1e-12:
            raise ValueError("probabilities must sum to 1 within 1e-12")
        object.__setattr__(self, "support", sup)
        object.__setattr__(self, "probs", pr)

    def as_dict(self) -> dict:
        return dict(zip(self.support, self.probs))


@dataclass(frozen=True)
class MixingReport:
    """Worst-case discrepancy per separation plus a log-linear rate fit."""

    kind: str
    distances: tuple  # (separation, worst discrepancy) pairs, r increasing
    rate: float
    residual: float

    def __post_init__(self):
        rs = [r for r, _ in self.distances]
        if rs != sorted(set(rs)):
            raise ValueError("separations must be strictly increasing")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["separation", "worst_discrepancy"])
        for r, v in self.distances:
            w.writerow([r, repr(v)])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({
            "kind": self.kind,
            "distances": [[r, v] for r, v in self.distances],
            "rate": self.rate,
            "residual": self.residual,
        })


def _site_plan(spec: Spec, V: Region, tau: BoundaryCondition, graph):
    """Per-vertex lists of (earlier interior neighbor index) and boundary symbols."""
    plan = []
    for i, v in enumerate(V.vertices):
        inner = []
        outer = []
        for u in graph.neighbors(v):
            if u in V:
                j = V.index(u)
                if j < i:
                    inner.append(j)
            else:
                if u not in tau.region:
                    raise ValueError(f"boundary condition missing vertex {u}")
                outer.append(tau.value_at(u))
        plan.append((tuple(inner), tuple(outer)))
    return plan


def _enumerate_weighted(spec: Spec, V: Region, tau: BoundaryCondition, graph=None):
    """Depth-first enumeration of feasible configurations with their weights."""
    if graph is None:
        graph = LatticeGraph(V.dimension)
    q = spec.q
    if q ** len(V) > INTERIOR_CAP:
        raise CapacityError(
            f"interior enumeration {q}^{len(V)} exceeds cap {INTERIOR_CAP}")
    plan = _site_plan(spec, V, tau, graph)
    ok, vw, ew = spec.ok, spec.vw, spec.ew
    n = len(V)
    configs: list = []
    weights: list = []
    assign = [0] * n

    def rec(i: int, w: float):
        if i == n:
            configs.append(tuple(assign))
            weights.append(w)
            return
        inner, outer = plan[i]
        for a in range(q):
            wa = w * vw[a]
            feas = True
            for j in inner:
                b = assign[j]
                if not ok[a, b]:
                    feas = False
                    break
                wa *= ew[a, b]
            if not feas:
                continue
            for b in outer:
                if not ok[a, b]:
                    feas = False
                    break
                wa *= ew[a, b]
            if not feas:
                continue
            assign[i] = a
            rec(i + 1, wa)

    rec(0, 1.0)
    return configs, weights


def enumerate_feasible(spec: Spec, V: Region, tau: BoundaryCondition,
                       graph=None) -> list:
    """All interior configurations of positive weight, in deterministic order.

    Empty list means tau admits no extension (the caller decides whether that
    disqualifies tau as a boundary condition).
    """
    configs, _ = _enumerate_weighted(spec, V, tau, graph)
    return configs


def conditional_dist(spec: Spec, V: Region, tau: BoundaryCondition,
                     graph=None) -> Pmf:
    """Exact conditional distribution on V given boundary values tau."""
    configs, weights = _enumerate_weighted(spec, V, tau, graph)
    if not configs:
        raise InfeasibleBoundaryError(
            "boundary condition admits no feasible interior configuration")
    if len(V) > FSUM_THRESHOLD:
        z = math.fsum(weights)
        probs = [w / z for w in weights]
        # renormalize exactly so the Pmf invariant holds bit-for-bit
        s = math.fsum(probs)
        probs = [p / s for p in probs]
    else:
        z = sum(weights)
        probs = [w / z for w in weights]
        s = sum(probs)
        probs = [p / s for p in probs]
    return Pmf(V, tuple(configs), tuple(probs))


def marginal(p: Pmf, U: Region) -> Pmf:
    """Exact projection of p onto U (fibers summed)."""
    if not U.issubset(p.region):
        raise ValueError("marginal target must be contained in the pmf region")
    if U.vertices == p.region.vertices:
        return p
    cols = [p.region.index(u) for u in U.vertices]
    acc: dict = {}
    for cfg, pr in zip(p.support, p.probs):
        key = tuple(cfg[c] for c in cols)
        acc[key] = acc.get(key, 0.0) + pr
    sup = tuple(sorted(acc))
    return Pmf(U, sup, tuple(acc[k] for k in sup))


def tv_distance(p: Pmf, q: Pmf) -> float:
    """Half the L1 distance over the union of supports."""
    if p.region.vertices != q.region.vertices:
        raise ValueError("tv_distance requires pmfs on the same region")
    pd, qd = p.as_dict(), q.as_dict()
    keys = set(pd) | set(qd)
    return 0.5 * math.fsum(abs(pd.get(k, 0.0) - qd.get(k, 0.0)) for k in keys)


def _consistency_plan(spec: Spec, B: Region, graph):
    """Earlier-neighbor adjacency within B for pruned boundary enumeration."""
    plan = []
    for i, v in enumerate(B.vertices):
        inner = []
        for u in graph.neighbors(v):
            if u in B:
                j = B.index(u)
                if j < i:
                    inner.append(j)
        plan.append(tuple(inner))
    return plan


def enumerate_boundary_conditions(spec: Spec, V: Region, graph=None,
                                  boundary_cap: int = BOUNDARY_CAP) -> list:
    """All feasible boundary conditions on the boundary of V.

    Feasible = pairwise edge-consistent where the boundary contains adjacent
    vertices, and admitting at least one feasible interior extension.
    """
    if graph is None:
        graph = LatticeGraph(V.dimension)
    B = boundary(V)
    q = spec.q
    if q ** len(B) > boundary_cap:
        raise CapacityError(
            f"boundary enumeration {q}^{len(B)} exceeds cap {boundary_cap}")
    plan = _consistency_plan(spec, B, graph)
    ok = spec.ok
    n = len(B)
    out: list = []
    assign = [0] * n

    def rec(i: int):
        if i == n:
            tau = BoundaryCondition(B, tuple(assign))
            if enumerate_feasible(spec, V, tau, graph):
                out.append(tau)
            return
        for a in range(q):
            if all(ok[a, assign[j]] for j in plan[i]):
                assign[i] = a
                rec(i + 1)

    rec(0)
    return out


def gamma(spec: Spec, V: Region, U: Region, graph=None,
          boundary_cap: int = BOUNDARY_CAP) -> float:
    """Sum over U-configurations of the minimum conditional marginal
    probability across every feasible boundary condition of V."""
    if not U.issubset(V):
        raise ValueError("gamma requires U contained in V")
    taus = enumerate_boundary_conditions(spec, V, graph, boundary_cap)
    mins: dict | None = None
    for tau in taus:
        m = marginal(conditional_dist(spec, V, tau, graph), U).as_dict()
        if mins is None:
            mins = m
        else:
            mins = {w: min(p, m.get(w, 0.0)) for w, p in mins.items()}
    if mins is None:
        raise InfeasibleBoundaryError("no feasible boundary condition exists")
    return math.fsum(mins[w] for w in sorted(mins))


def check_high_noise(spec: Spec) -> tuple:
    """gamma({v},{v}) against 1 - 1/2d. Returns (value, threshold, pass)."""
    v = region([(0,) * spec.dimension])
    g = gamma(spec, v, v)
    threshold = 1.0 - 1.0 / (2 * spec.dimension)
    return g, threshold, g > threshold


def _single_site_conditionals(spec: Spec):
    """All feasible boundary conditions of the origin with their conditionals."""
    v = region([(0,) * spec.dimension])
    taus = enumerate_boundary_conditions(spec, v)
    return v, [(tau, conditional_dist(spec, v, tau)) for tau in taus]


def check_dobrushin(spec: Spec) -> tuple:
    """Exact Dobrushin influence sum. Returns (sum, pass)."""
    v, pairs = _single_site_conditionals(spec)
    B = boundary(v)
    total = 0.0
    for u in B.vertices:
        iu = B.index(u)
        groups: dict = {}
        for tau, p in pairs:
            key = tau.values[:iu] + tau.values[iu + 1:]
            groups.setdefault(key, []).append(p)
        worst = 0.0
        for ps in groups.values():
            for i in range(len(ps)):
                for j in range(i + 1, len(ps)):
                    worst = max(worst, tv_distance(ps[i], ps[j]))
        total += worst
    return total, total < 1.0


def check_disagreement_percolation(spec: Spec, p_c: float) -> tuple:
    """Max single-site TV over all feasible boundary pairs vs caller's p_c."""
    _, pairs = _single_site_conditionals(spec)
    worst = 0.0
    for i in range(len(pairs)):
        for j in range(i + 1, len(pairs)):
            worst = max(worst, tv_distance(pairs[i][1], pairs[j][1]))
    return worst, worst < p_c


def _ratio_discrepancy(p: Pmf, q: Pmf) -> float:
    """max over the support of p of 1 - q(w)/p(w); 1 if q misses support."""
    qd = q.as_dict()
    worst = 0.0
    for w, pw in zip(p.support, p.probs):
        if pw <= 0:
            continue
        worst = max(worst, 1.0 - qd.get(w, 0.0) / pw)
    return worst


def mixing_profile(spec: Spec, kind: str, family) -> MixingReport:
    """Worst-case discrepancy per separation over a caller-supplied family.

    family: iterable of (U, V, generator). The generator yields boundary pairs
    (tau, tau_prime) for weak kinds and (tau, tau_prime, sigma_region) for
    strong kinds; separation is dist(U, boundary(V)) resp. dist(U, sigma).
    """
    if kind not in ("weak", "strong", "ratio_weak", "ratio_strong"):
        raise ValueError(f"unknown mixing kind {kind!r}")
    strong = kind in ("strong", "ratio_strong")
    ratio = kind in ("ratio_weak", "ratio_strong")
    worst: dict = {}
    for U, V, gen in family:
        for item in gen():
            if strong:
                tau, tau2, sigma = item
                r = dist(U, sigma)
            else:
                tau, tau2 = item
                r = dist(U, boundary(V))
            p = marginal(conditional_dist(spec, V, tau), U)
            q = marginal(conditional_dist(spec, V, tau2), U)
            if ratio:
                d = max(_ratio_discrepancy(p, q), _ratio_discrepancy(q, p))
            else:
                d = tv_distance(p, q)
            worst[r] = max(worst.get(r, 0.0), d)
    pts = tuple(sorted(worst.items()))
    xs = [r for r, v in pts if v > 0]
    ys = [math.log(v) for r, v in pts if v > 0]
    if len(xs) >= 2:
        A = np.vstack([xs, np.ones(len(xs))]).T
        coef, res, _, _ = np.linalg.lstsq(A, np.array(ys), rcond=None)
        rate = float(coef[0])
        residual = float(math.sqrt(res[0] / len(xs))) if len(res) else 0.0
    else:
        rate, residual = 0.0, 0.0
    return MixingReport(kind, pts, rate, residual)


def d2_weak_family(spec: Spec, sizes, boundary_labels) -> list:
    """Preset weak-mixing family for d=2: U = origin, V = boxes of growing
    radius, boundary pairs = all pairs of constant boundary conditions."""
    if spec.dimension != 2:
        raise ValueError("preset family is for dimension 2")
    U = region([(0, 0)])
    fam = []
    for n in sizes:
        V = ball(n, 2)
        B = boundary(V)

        def gen(B=B):
            taus = [BoundaryCondition.constant(spec, B, lab)
                    for lab in boundary_labels]
            taus = [t for t in taus
                    if enumerate_feasible(spec, V, t)]  # noqa: B023
            return [(taus[i], taus[j])
                    for i in range(len(taus)) for j in range(i + 1, len(taus))]

        fam.append((U, V, gen))
    return fam


INFINITE_RATE = math.inf


def rho_star(rho_values, r: int, d: int) -> float:
    """Transformed rate 3 * s_{r//2} * sqrt(rho(r//2)); infinite at r = 1."""
    if r < 1:
        raise ValueError("r must be >= 1")
    if r == 1:
        return INFINITE_RATE
    half = r // 2
    if half not in rho_values:
        raise ValueError(f"rho value at {half} required but missing")
    return 3.0 * sphere_count(half, d) * math.sqrt(rho_values[half])
