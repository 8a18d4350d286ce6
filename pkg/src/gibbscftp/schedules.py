"""Concrete schedule builders.

Two families: constant schedules (one block, p = 1/2, one coupling reused
at every step) and growing-block plans (half-sides ell_1 < ell_2 < ...
with p_n = ell_n^{-d}), whose validity rests on an exact integer
separation inequality between consecutive half-sides and a per-stage
certified lower bound on the block coincidence probability gamma.
"""

from __future__ import annotations

import configparser
import io
import math
from dataclasses import dataclass, field as dfield
from fractions import Fraction

import numpy as np

from . import exactgibbs, randomness as rnd
from .coupling import contracting_coupling_2d, optimal_grand_coupling
from .dynamics import Schedule
from .lattice import Region, ball, boundary, unit_steps
from .model import Spec, is_interaction_free


class _AnyKey:
    """Membership oracle accepting every boundary condition (used by
    couplings that do not enumerate their key family)."""

    def __contains__(self, key) -> bool:
        return True


class FreeBlockCoupling:
    """Grand coupling for interaction-free specifications: every block
    vertex is sampled from the vertex-weight law with a shared per-vertex
    variate, identically for every boundary condition (coincidence 1)."""

    def __init__(self, spec: Spec, V: Region):
        if not is_interaction_free(spec):
            raise ValueError("free-block coupling needs an interaction-free "
                             "specification")
        self.spec = spec
        self.V = V
        self.U = V
        self.boundary_region = boundary(V)
        self.key_index = _AnyKey()
        self.keys = ()
        self.gamma = 1.0
        w = spec.vw / spec.vw.sum()
        self._cdf = np.cumsum(w)

    def evaluate(self, tau, draw) -> tuple:
        out = []
        for li in range(len(self.V)):
            u = draw.uniform(rnd.TAG_RESIDUAL, li)
            a = int(np.searchsorted(self._cdf, u * self._cdf[-1],
                                    side="right"))
            out.append(min(a, self.spec.q - 1))
        return tuple(out)


@dataclass(frozen=True)
class FixedPlan:
    """Constant schedule: one block, p = 1/2, one coupling kind."""

    block: Region
    coupling_kind: str
    params: tuple = ()
    p: float = 0.5

    def __post_init__(self):
        if (0,) * self.block.dimension not in self.block:
            raise ValueError("block must contain the origin")


@dataclass
class GrowingPlan:
    """Growing-block plan: half-sides ells, p_n = ell_n^{-d}.

    Stage n is *certified* when gamma(Lambda_{ell_n}, Lambda_{3 delta
    ell_n}) > eps has been established (exactly, analytically, or as a
    99% Monte Carlo lower confidence bound); uncertified stages are kept
    but flagged. gamma_lcb[n] records the certified lower bound (nan when
    uncertified); gamma_method[n] records how.
    """

    delta: Fraction
    eps: float
    d: int
    ells: tuple
    certified: tuple
    gamma_lcb: tuple
    gamma_method: tuple
    truncated_reason: str = ""

    def __post_init__(self):
        self.delta = Fraction(self.delta)
        if not (0 < self.delta < Fraction(1, 3)):
            raise ValueError("delta must lie in (0, 1/3)")
        if not (0.0 < self.eps < 1.0 / 3.0):
            raise ValueError("eps must lie in (0, 1/3)")
        self.ells = tuple(int(x) for x in self.ells)
        if any(x < 1 for x in self.ells):
            raise ValueError("half-sides must be positive")
        for i in range(len(self.ells) - 1):
            if not self.separation_ok(i + 1):
                raise ValueError(
                    f"separation inequality fails between stages {i + 1} "
                    f"and {i + 2}")

    def separation_ok(self, n: int) -> bool:
        """Exact integer check delta * ell_{n+1} > 4 d (ell_1+...+ell_n)
        (stages are 1-based; checks the pair (n, n+1))."""
        s = sum(self.ells[:n])
        return self.delta * self.ells[n] > 4 * self.d * s

    def p_at(self, n: int) -> float:
        return float(self.ells[n - 1]) ** (-self.d)

    def inner_radius(self, n: int):
        """delta * ell_n as an exact Fraction."""
        return self.delta * self.ells[n - 1]

    def coincidence_radius(self, n: int):
        """3 delta * ell_n as an exact Fraction."""
        return 3 * self.delta * self.ells[n - 1]

    def exp_growth_constant(self) -> float:
        """The least c with ell_n <= e^{c n} for all built stages."""
        return max(math.log(x) / (i + 1) for i, x in enumerate(self.ells))

    def to_config(self) -> str:
        cp = configparser.ConfigParser()
        cp["plan"] = {
            "delta": f"{self.delta.numerator}/{self.delta.denominator}",
            "eps": repr(self.eps),
            "d": str(self.d),
            "ells": ",".join(map(str, self.ells)),
            "certified": ",".join("1" if c else "0" for c in self.certified),
            "gamma_lcb": ",".join(repr(float(g)) for g in self.gamma_lcb),
            "gamma_method": ",".join(self.gamma_method),
        }
        if self.truncated_reason:
            cp["plan"]["truncated_reason"] = self.truncated_reason
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_config(cls, text: str) -> "GrowingPlan":
        cp = configparser.ConfigParser()
        cp.read_string(text)
        s = cp["plan"]
        num, _, den = s["delta"].partition("/")
        return cls(
            delta=Fraction(int(num), int(den or 1)),
            eps=float(s["eps"]),
            d=int(s["d"]),
            ells=tuple(int(x) for x in s["ells"].split(",")),
            certified=tuple(x == "1" for x in s["certified"].split(",")),
            gamma_lcb=tuple(float(x) for x in s["gamma_lcb"].split(",")),
            gamma_method=tuple(s["gamma_method"].split(",")),
            truncated_reason=s.get("truncated_reason", ""),
        )


def minimal_next_ell(d: int, delta: Fraction, ells) -> int:
    """The least integer ell with delta * ell > 4 d * sum(ells), exactly."""
    bound = Fraction(4 * d * sum(ells)) / Fraction(delta)
    return int(bound) + 1


def fixed_schedule(spec: Spec, V: Region, coupling_kind: str = "optimal_on_U",
                   params: dict | None = None, p: float = 0.5) -> Schedule:
    """Constant schedule: block V, activity probability p (default 1/2),
    one coupling for every step.

    coupling_kind "optimal_on_U" builds the optimal grand coupling over all
    boundary conditions of V with coincidence on U = params.get("U", V)
    (falling back to a trivial shared-variate coupling for interaction-free
    specs whose boundary family is too large to enumerate). "contracting_2d"
    builds the staged contracting coupling; V must be the box Lambda_n with
    params n, r, s.
    """
    params = dict(params or {})
    if (0,) * V.dimension not in V:
        raise ValueError("block must contain the origin")
    if coupling_kind == "optimal_on_U":
        U = params.get("U", V)

        def factory(n):
            try:
                return optimal_grand_coupling(spec, V, U)
            except exactgibbs.CapacityError:
                if is_interaction_free(spec):
                    return FreeBlockCoupling(spec, V)
                raise
    elif coupling_kind == "contracting_2d":
        nn, r, s = (int(params[k]) for k in ("n", "r", "s"))
        if V.vertices != ball(nn, 2).vertices:
            raise ValueError("contracting_2d requires V = Lambda_n")

        def factory(n):
            return contracting_coupling_2d(spec, nn, r, s)
    else:
        raise ValueError(f"unknown coupling kind: {coupling_kind}")
    return Schedule(spec, p, V, factory,
                    name=f"fixed:{coupling_kind}")


def certify_gamma(spec: Spec, V: Region, U: Region,
                  gamma_budget: int = 200,
                  field: rnd.RandomField | None = None) -> tuple:
    """Certified lower bound for gamma(V, U), as (lcb, method).

    Ladder: exact enumeration when the boundary family is small enough;
    analytic 1 for interaction-free specs; a 99% Clopper-Pearson lower
    confidence bound on the coincidence frequency of a monotone grand
    coupling for attractive binary specs (any grand coupling's coincidence
    probability lower-bounds gamma); otherwise (nan, "uncertified").
    """
    if is_interaction_free(spec):
        return 1.0, "analytic"
    try:
        return exactgibbs.gamma(spec, V, U), "exact"
    except exactgibbs.CapacityError:
        pass
    if _is_attractive_binary(spec) and gamma_budget > 0 \
            and len(V) <= 1 << 10:
        field = field or rnd.RandomField(0)
        hits = _monotone_coincidence_draws(spec, V, U, field, gamma_budget)
        return _clopper_pearson_lcb(hits, gamma_budget, 0.99), "mc99"
    return float("nan"), "uncertified"


def _is_attractive_binary(spec: Spec) -> bool:
    return (spec.q == 2 and bool(spec.ok.all())
            and spec.ew[0, 0] * spec.ew[1, 1] >= spec.ew[0, 1] * spec.ew[1, 0])


def _clopper_pearson_lcb(k: int, n: int, conf: float) -> float:
    from scipy.stats import beta
    if k == 0:
        return 0.0
    return float(beta.ppf(1.0 - conf, k, n - k + 1))


def _monotone_coincidence_draws(spec: Spec, V: Region, U: Region,
                                field: rnd.RandomField, n_draws: int) -> int:
    """Coincidence count of a monotone grand coupling over all boundary
    conditions of V: per draw, exact samples under the two extremal
    boundary conditions via monotone CFTP with shared randomness; by the
    sandwich property all other boundary conditions lie between, so
    extremal agreement on U equals full-family coincidence on U.
    """
    verts = list(V.vertices)
    nv = len(verts)
    vidx = {v: i for i, v in enumerate(verts)}
    bnd = boundary(V).vertices
    ucols = [vidx[v] for v in U.vertices]
    # precomputed neighbor structure: interior neighbor indices and
    # boundary-neighbor counts per site
    inbr, bcnt = [], []
    for v in verts:
        ii, bc = [], 0
        for e in unit_steps(V.dimension):
            w = tuple(a + b for a, b in zip(v, e))
            if w in vidx:
                ii.append(vidx[w])
            elif w in set(bnd):
                bc += 1
        inbr.append(ii)
        bcnt.append(bc)
    lw = np.log(spec.ew)
    lv = np.log(spec.vw)

    def p_one(ones_among_nbrs: int, deg: int) -> float:
        # conditional P(x_v = 1 | #neighbors equal to 1) for q = 2
        z1 = lv[1] + ones_among_nbrs * lw[1, 1] \
            + (deg - ones_among_nbrs) * lw[1, 0]
        z0 = lv[0] + ones_among_nbrs * lw[0, 1] \
            + (deg - ones_among_nbrs) * lw[0, 0]
        return 1.0 / (1.0 + math.exp(z0 - z1))

    deg = [len(inbr[i]) + bcnt[i] for i in range(nv)]
    ptab = [[p_one(k, deg[i]) for k in range(deg[i] + 1)] for i in range(nv)]

    def sweep_from(states, t0, t1, draw_id):
        # states: list of arrays evolved in place, paired with the count of
        # boundary neighbors set to 1 (0 for the low tau, bcnt for high)
        for t in range(t0, t1):
            us = rnd.uniform_array(
                field, [np.int64(rnd.TAG_GENERIC), np.int64(draw_id),
                        np.int64(t), np.arange(2, dtype=np.int64)])
            site = min(int(us[0] * nv), nv - 1)
            u = us[1]
            for x, bones in states:
                ones = int(x[inbr[site]].sum()) + (bcnt[site] if bones else 0)
                x[site] = 1 if u < ptab[site][ones] else 0

    hits = 0
    for i in range(n_draws):
        T = 64
        while True:
            lo_low = np.zeros(nv, dtype=np.int8)
            hi_low = np.ones(nv, dtype=np.int8)
            lo_high = np.zeros(nv, dtype=np.int8)
            hi_high = np.ones(nv, dtype=np.int8)
            chains = [(lo_low, False), (hi_low, False),
                      (lo_high, True), (hi_high, True)]
            sweep_from(chains, -T, 0, i)
            if (lo_low == hi_low).all() and (lo_high == hi_high).all():
                break
            T *= 2
            if T > 1 << 22:
                raise RuntimeError("monotone CFTP failed to coalesce")
        if (lo_low[ucols] == lo_high[ucols]).all():
            hits += 1
    return hits


def growing_schedule(spec: Spec, delta=Fraction(1, 4), eps: float = 0.1,
                     n_max: int = 4, gamma_budget: int = 200,
                     ell1: int = 1,
                     field: rnd.RandomField | None = None) -> GrowingPlan:
    """The minimal growing plan: ell_1 given, each later half-side the
    least integer satisfying the exact separation inequality; each stage's
    coincidence bound gamma(Lambda_ell, Lambda_{3 delta ell}) > eps
    certified where feasible, flagged otherwise. A stage whose certification
    *fails* (certified value <= eps) truncates the plan with a diagnostic.
    """
    delta = Fraction(delta)
    if not (0 < delta < Fraction(1, 3)):
        raise ValueError("delta must lie in (0, 1/3)")
    if not (0.0 < eps < 1.0 / 3.0):
        raise ValueError("eps must lie in (0, 1/3)")
    d = spec.dimension
    ells, certs, lcbs, methods = [], [], [], []
    reason = ""
    ell = int(ell1)
    free = is_interaction_free(spec)
    for n in range(1, n_max + 1):
        if free:
            # no region construction: half-sides grow fast and the boxes
            # can be far beyond memory, but the bound is analytic
            lcb, method = 1.0, "analytic"
        else:
            V = ball(ell, d)
            U = ball(float(3 * delta * ell), d)
            lcb, method = certify_gamma(spec, V, U, gamma_budget, field)
        if method != "uncertified" and not lcb > eps:
            reason = (f"stage {n}: certified gamma bound {lcb:.6g} <= eps "
                      f"{eps:g} for ell = {ell}")
            break
        ells.append(ell)
        certs.append(method != "uncertified")
        lcbs.append(lcb)
        methods.append(method)
        ell = minimal_next_ell(d, delta, ells)
    if not ells:
        raise ValueError("no certifiable first stage: " + reason)
    return GrowingPlan(delta=delta, eps=eps, d=d, ells=tuple(ells),
                       certified=tuple(certs), gamma_lcb=tuple(lcbs),
                       gamma_method=tuple(methods), truncated_reason=reason)


def plan_schedule(spec: Spec, plan: GrowingPlan) -> Schedule:
    """Dynamics schedule realizing a growing plan: stage n uses block
    Lambda_{ell_n}, p_n = ell_n^{-d}, and a grand coupling optimal for
    marginals on Lambda_{3 delta ell_n} (free-block coupling when the
    spec is interaction-free and enumeration is out of reach)."""
    d = plan.d

    def p(n):
        return plan.p_at(min(n, len(plan.ells)))

    def block(n):
        return ball(plan.ells[min(n, len(plan.ells)) - 1], d)

    def factory(n):
        ell = plan.ells[min(n, len(plan.ells)) - 1]
        V = ball(ell, d)
        U = ball(float(3 * plan.delta * ell), d)
        try:
            return optimal_grand_coupling(spec, V, U)
        except exactgibbs.CapacityError:
            if is_interaction_free(spec):
                return FreeBlockCoupling(spec, V)
            raise
    return Schedule(spec, p, block, factory, name="growing")


def _binom_pmf_exact(n: int, k: int, p: Fraction) -> Fraction:
    return Fraction(math.comb(n, k)) * p ** k * (1 - p) ** (n - k)


def stage_success_bound(plan: GrowingPlan, n: int,
                        pi_E: Fraction | None = None) -> Fraction:
    """Exact product lower bound for the stage-n success probability:
    pi(E) * P(Bin(|Lambda_{delta ell}|, p) = 1) * P(Bin(m, p) = 0) with m
    the number of sites in the annulus Lambda_{delta ell + r} minus
    Lambda_{delta ell} and r the step radius 2 d ell + 1. pi_E defaults to
    the stage's certified coincidence lower bound (eps when uncertified)."""
    d = plan.d
    ell = plan.ells[n - 1]
    p = Fraction(1, ell ** d)
    inner = int(plan.inner_radius(n))
    r = 2 * d * ell + 1
    # closed-form box sizes (the boxes themselves can exceed memory)
    n_in = (2 * inner + 1) ** d
    n_out = (2 * (inner + r) + 1) ** d - n_in
    if pi_E is None:
        base = plan.gamma_lcb[n - 1] if plan.certified[n - 1] else plan.eps
        pi_E = Fraction(base).limit_denominator(10 ** 9)
    return (Fraction(pi_E) * _binom_pmf_exact(n_in, 1, p)
            * _binom_pmf_exact(n_out, 0, p))


def stage_success_bound_log(plan: GrowingPlan, n: int,
                            pi_E: float | None = None) -> float:
    """Natural log of the stage-n success bound in floats; usable when the
    exact Fraction form is astronomically small (large stages)."""
    d = plan.d
    ell = plan.ells[n - 1]
    p = 1.0 / ell ** d
    inner = int(plan.inner_radius(n))
    r = 2 * d * ell + 1
    n_in = (2 * inner + 1) ** d
    n_out = (2 * (inner + r) + 1) ** d - n_in
    if pi_E is None:
        pi_E = plan.gamma_lcb[n - 1] if plan.certified[n - 1] else plan.eps
    return (math.log(pi_E) + math.log(n_in) + math.log(p)
            + (n_in - 1) * math.log1p(-p) + n_out * math.log1p(-p))


def simulate_stage_success(spec: Spec, plan: GrowingPlan, n: int,
                           field: rnd.RandomField, n_draws: int) -> float:
    """Empirical stage-n success frequency at the origin: the coupling
    coincidence event together with exactly one active vertex in
    Lambda_{delta ell} and none in the surrounding annulus of width r.
    Draw i reads the step-n activity field of substream field.split(i)
    (plus the block coupling selector when the spec has interactions).
    """
    d = plan.d
    ell = plan.ells[n - 1]
    p = plan.p_at(n)
    inner = int(plan.inner_radius(n))
    r = 2 * d * ell + 1
    inner_sites = sorted(ball(inner, d))
    ann_sites = sorted(set(ball(inner + r, d)) - set(ball(inner, d)))
    coords_in = np.array(inner_sites, dtype=np.int64) & 0xFFFFFFFF
    coords_out = np.array(ann_sites, dtype=np.int64) & 0xFFFFFFFF
    free = is_interaction_free(spec)
    if not free:
        V = ball(ell, d)
        U = ball(float(3 * plan.delta * ell), d)
        gc = optimal_grand_coupling(spec, V, U)  # may raise CapacityError
    reps = np.arange(n_draws, dtype=np.int64)

    def acts(coords):
        cols = [coords[None, :, k] for k in range(d)]
        cols += [np.int64(n), np.int64(rnd.TAG_ACTIVE)]
        return rnd.uniform_array(field, cols, replicas=reps[:, None]) < p

    a_in = acts(coords_in)
    a_out = acts(coords_out)
    ok = (a_in.sum(axis=1) == 1) & ~a_out.any(axis=1)
    if not free:
        # coincidence event of the optimal coupling: shared selector < gamma
        chosen_cols = a_in.argmax(axis=1)
        sel = np.empty(n_draws)
        for i in range(n_draws):
            u_site = np.array(inner_sites[chosen_cols[i]],
                              dtype=np.int64) & 0xFFFFFFFF
            sel[i] = field.split(int(i)).uniform(
                (tuple(int(c) for c in u_site), n, rnd.TAG_SELECT))
        ok &= sel < gc.gamma
    return float(ok.mean())
