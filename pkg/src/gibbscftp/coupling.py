"""Grand couplings of conditional-distribution families and their diagnostics.

A grand coupling realizes samples from every P^tau_V on one probability
space as deterministic functions of addressable randomness. This module
builds the optimal-on-marginal construction (coincidence probability equal
to gamma(V, U)), a staged contracting construction for 2d boxes, a pairwise
three-stage coupling, and the contraction diagnostics kappa, lambda(tau, A)
and lambda_psi.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import randomness as rnd
from ._coldp import BoxDP
from .lattice import LatticeGraph, Region, ball, boundary, l1, region
from .model import BoundaryCondition, Spec
from .exactgibbs import (CapacityError, Pmf, conditional_dist,
                         enumerate_boundary_conditions, gamma, marginal)

EXACT_JOINT_CAP = 1 << 20

# stage tags private to the staged constructions
_STAGE_U = 11
_STAGE_FACE = 12
_STAGE_COMP = 13
_STAGE_PAIR_B = 14
_STAGE_PAIR_COIN = 15
_STAGE_PAIR_EXC = 16
_STAGE_PAIR_W = 17
_STAGE_PAIR_REST = 18


class RandomDraw:
    """One draw: a view of a RandomField under a fixed address prefix."""

    def __init__(self, field: rnd.RandomField, prefix: tuple = ()):
        self.field = field
        self.prefix = tuple(prefix)

    def uniform(self, *suffix) -> float:
        return self.field.uniform(self.prefix + suffix)


def _fold(values) -> int:
    """Stable 64-bit fold of an int sequence (for hashes and sub-addresses)."""
    h = 0x243F6A8885A308D3
    for v in values:
        h = rnd._mix(h, int(v))
    return h


def tau_hash(tau: BoundaryCondition) -> str:
    return format(_fold(tau.values), "016x")


@dataclass(frozen=True)
class Psi:
    """Uncertainty functional on non-empty symbol sets: zero on singletons,
    monotone under inclusion."""

    fn: object
    name: str = "psi"

    def __call__(self, symbols) -> float:
        s = frozenset(symbols)
        if not s:
            raise ValueError("psi is defined on non-empty sets")
        v = float(self.fn(s))
        if len(s) == 1 and v != 0.0:
            raise ValueError("psi must vanish on singletons")
        if v < 0:
            raise ValueError("psi must be non-negative")
        return v


psi_one = Psi(lambda s: 1.0 if len(s) > 1 else 0.0, name="psi_one")


@dataclass(frozen=True)
class DisagreementSet:
    """A subset of a boundary region."""

    sites: Region
    parent: Region

    def __post_init__(self):
        if not self.sites.issubset(self.parent):
            raise ValueError("disagreement set must lie inside its boundary region")

    def __len__(self):
        return len(self.sites)

    def __iter__(self):
        return iter(self.sites)


def _as_sites(A) -> Region:
    return A.sites if isinstance(A, DisagreementSet) else A


class GrandCoupling:
    """Table-based grand coupling of a finite family of pmfs on a region V.

    The family is keyed (by boundary conditions or plain indices). Each key's
    sample is a deterministic function of (key, draw): a shared selector
    uniform picks, with probability gamma, a common U-configuration from the
    normalized minimum measure; otherwise each key samples its residual
    U-marginal sequentially per vertex with one shared uniform per vertex;
    the remaining vertices extend conditionally with shared per-vertex
    variates in both branches.
    """

    def __init__(self, V: Region, U: Region, keys, support, P,
                 spec: Spec | None = None, boundary_region: Region | None = None):
        if not U.issubset(V):
            raise ValueError("U must be contained in V")
        self.V, self.U, self.spec = V, U, spec
        self.boundary_region = boundary_region
        self.keys = tuple(keys)
        self.key_index = {k: i for i, k in enumerate(self.keys)}
        self.support = tuple(map(tuple, support))
        self.sup_arr = np.array(self.support, dtype=np.int64).reshape(
            len(self.support), len(V))
        self.P = np.asarray(P, dtype=float)
        if self.P.shape != (len(self.keys), len(self.support)):
            raise ValueError("probability table shape mismatch")
        self.nq = int(self.sup_arr.max()) + 1 if len(self.support) else 0
        if spec is not None:
            self.nq = spec.q
        # U-projection of the support
        self.ucols = [V.index(u) for u in U.vertices]
        self.extcols = [i for i in range(len(V)) if i not in set(self.ucols)]
        uproj_cfg = [tuple(c[i] for i in self.ucols) for c in self.support]
        self.usupport = tuple(sorted(set(uproj_cfg)))
        uindex = {c: i for i, c in enumerate(self.usupport)}
        self.uproj = np.array([uindex[c] for c in uproj_cfg], dtype=np.int64)
        nk, nus = len(self.keys), len(self.usupport)
        self.M = np.zeros((nk, nus))
        np.add.at(self.M, (slice(None), self.uproj), self.P)
        self.minm = self.M.min(axis=0)
        self.gamma = float(math.fsum(self.minm))
        self.min_cum = np.cumsum(self.minm)
        if self.gamma < 1.0 - 1e-15:
            self.R = (self.M - self.minm[None, :]) / (1.0 - self.gamma)
        else:
            self.R = np.zeros_like(self.M)
        # residual joint over the full support: R(omega_U) * P(. | omega_U)
        with np.errstate(invalid="ignore", divide="ignore"):
            ratio = np.where(self.M > 0, self.R / np.where(self.M > 0, self.M, 1.0), 0.0)
        self.resid_joint = self.P * ratio[:, self.uproj]
        self.exact_joint = nk * len(self.support) <= EXACT_JOINT_CAP
        self.full_product = len(self.support) == self.nq ** len(V)
        self.coupling_id = format(_fold(
            [nk, len(self.support), len(V), len(U)]), "016x")
        self.last_records: list = []
        self.last_stderr: float | None = None

    # ---- sampling -------------------------------------------------------

    def _levels(self):
        return list(self.ucols) + list(self.extcols)

    def evaluate(self, key, draw: RandomDraw) -> tuple:
        """Deterministic configuration on V for this key under the draw."""
        k = self.key_index[key]
        u0 = draw.uniform(rnd.TAG_SELECT)
        if u0 < self.gamma:
            w = draw.uniform(rnd.TAG_COMMON)
            ui = int(np.searchsorted(self.min_cum, w * self.gamma, side="right"))
            state = self.P[k] * (self.uproj == ui)
            start_level = len(self.ucols)
        else:
            state = self.resid_joint[k].copy()
            start_level = 0
        levels = self._levels()
        for li in range(start_level, len(levels)):
            col = levels[li]
            u = draw.uniform(rnd.TAG_RESIDUAL, li)
            m = np.bincount(self.sup_arr[:, col], weights=state, minlength=self.nq)
            cdf = np.cumsum(m)
            a = int(np.searchsorted(cdf, u * cdf[-1], side="right"))
            a = min(a, self.nq - 1)
            state = state * (self.sup_arr[:, col] == a)
        idx = int(np.argmax(state))
        return self.support[idx]

    # ---- exact joint law ------------------------------------------------

    def exact_atoms(self, keys=None) -> list:
        """Atoms (prob, per-key support index) of the joint law, exact.

        Only available in exact-joint mode (instance small enough).
        """
        if not self.exact_joint:
            raise CapacityError("instance too large for exact-joint mode")
        kidx = [self.key_index[k] for k in (keys or self.keys)]
        atoms: list = []
        levels = self._levels()

        def rec(states, prob, start):
            if prob <= 0:
                return
            if start == len(levels):
                atoms.append((prob, tuple(int(np.argmax(s)) for s in states)))
                return
            col = levels[start]
            cdfs = []
            for s in states:
                m = np.bincount(self.sup_arr[:, col], weights=s, minlength=self.nq)
                tot = m.sum()
                cdfs.append(np.cumsum(m) / tot)
            pts = np.unique(np.concatenate([[0.0], *cdfs, [1.0]]))
            for lo, hi in zip(pts[:-1], pts[1:]):
                if hi <= lo:
                    continue
                mid = 0.5 * (lo + hi)
                syms = [min(int(np.searchsorted(c, mid, side="right")), self.nq - 1)
                        for c in cdfs]
                nxt = [s * (self.sup_arr[:, col] == a)
                       for s, a in zip(states, syms)]
                rec(nxt, prob * (hi - lo), start + 1)

        if self.gamma > 0:
            nu = len(self.ucols)
            for ui in np.nonzero(self.minm > 0)[0]:
                states = [self.P[k] * (self.uproj == ui) for k in kidx]
                rec(states, float(self.minm[ui]), nu)
        if self.gamma < 1.0 - 1e-15:
            states = [self.resid_joint[k].copy() for k in kidx]
            rec(states, 1.0 - self.gamma, 0)
        return atoms

    # ---- vectorized residual sampling (full product support, U = V) -----

    def residual_configs_mc(self, n_draws: int, field: rnd.RandomField) -> np.ndarray:
        """Residual-branch samples for every key, (nkeys, n_draws) support
        indices, using the shared per-vertex variates. Requires U = V and
        full product support."""
        if self.ucols != list(range(len(self.V))) or not self.full_product:
            raise ValueError("vectorized path requires U = V with full support")
        nk = len(self.keys)
        nsup = len(self.support)
        q = self.nq
        C = np.concatenate([np.zeros((nk, 1)), np.cumsum(self.R, axis=1)], axis=1)
        draws = np.arange(n_draws, dtype=np.int64)
        s = np.zeros((nk, n_draws), dtype=np.int64)
        blocklen = nsup
        rows = np.arange(nk)[:, None]
        for li in range(len(self.V)):
            w = blocklen // q
            u = rnd.uniform_array(field, [draws, np.int64(rnd.TAG_RESIDUAL),
                                          np.int64(li)])
            lo = C[rows, s]
            hi = C[rows, s + blocklen]
            t = lo + u[None, :] * (hi - lo)
            j = np.zeros_like(s)
            for m in range(1, q):
                j += (t >= C[rows, s + m * w])
            s = s + j * w
            blocklen = w
        return s


def optimal_grand_coupling(spec: Spec, V: Region, U: Region,
                           graph=None) -> GrandCoupling:
    """Grand coupling of (P^tau_V) over every feasible boundary condition,
    realizing coincidence on U with probability exactly gamma(V, U)."""
    taus = enumerate_boundary_conditions(spec, V, graph)
    dists = [conditional_dist(spec, V, tau, graph) for tau in taus]
    support = sorted(set().union(*(d.support for d in dists)))
    sindex = {c: i for i, c in enumerate(support)}
    P = np.zeros((len(taus), len(support)))
    for i, d in enumerate(dists):
        for c, p in zip(d.support, d.probs):
            P[i, sindex[c]] = p
    B = boundary(V) if graph is None or isinstance(graph, LatticeGraph) \
        else taus[0].region
    return GrandCoupling(V, U, taus, support, P, spec=spec, boundary_region=B)


def coupling_from_pmfs(pmfs, labels=None) -> GrandCoupling:
    """Grand coupling of raw pmfs on a common region (keys = labels)."""
    reg = pmfs[0].region
    keys = tuple(labels) if labels is not None else tuple(range(len(pmfs)))
    support = sorted(set().union(*(p.support for p in pmfs)))
    sindex = {c: i for i, c in enumerate(support)}
    P = np.zeros((len(pmfs), len(support)))
    for i, p in enumerate(pmfs):
        if p.region.vertices != reg.vertices:
            raise ValueError("all pmfs must share one region")
        for c, pr in zip(p.support, p.probs):
            P[i, sindex[c]] = pr
    return GrandCoupling(reg, reg, keys, support, P)


# ---- diagnostics --------------------------------------------------------


def coincidence_probability(c: GrandCoupling, U: Region | None = None,
                            family=None, n_draws: int = 100000,
                            field: rnd.RandomField | None = None) -> float:
    """Probability that every family member produces the same values on U.

    Exact in exact-joint mode; otherwise Monte Carlo (standard error stored
    on c.last_stderr).
    """
    U = U or c.U
    fam = list(family) if family is not None else list(c.keys)
    if not fam:
        raise ValueError("family must be non-empty")
    cols = [c.V.index(v) for v in U.vertices]
    if len(fam) == 1:
        c.last_stderr = 0.0
        return 1.0
    if c.exact_joint:
        tot = 0.0
        for p, profile in c.exact_atoms(fam):
            vals = {tuple(c.support[i][j] for j in cols) for i in profile}
            if len(vals) == 1:
                tot += p
        c.last_stderr = 0.0
        return tot
    field = field or rnd.RandomField(0)
    hits = 0
    for i in range(n_draws):
        draw = RandomDraw(field, (i,))
        vals = {tuple(c.evaluate(k, draw)[j] for j in cols) for k in fam}
        hits += len(vals) == 1
    est = hits / n_draws
    c.last_stderr = math.sqrt(max(est * (1 - est), 1e-12) / n_draws)
    return est


def kappa(c: GrandCoupling, n_draws: int = 20000,
          field: rnd.RandomField | None = None) -> float:
    """Average over vertices of the probability that all keys coincide there."""
    nv = len(c.V)
    if c.exact_joint:
        atoms = c.exact_atoms()
        tot = 0.0
        for p, profile in atoms:
            agree = sum(len({c.support[i][j] for i in profile}) == 1
                        for j in range(nv))
            tot += p * agree / nv
        c.last_stderr = 0.0
        return tot
    field = field or rnd.RandomField(0)
    if c.ucols == list(range(nv)) and c.full_product:
        X = c.residual_configs_mc(n_draws, field)
        syms = _decode(X, nv, c.nq)
        frac = (syms.min(axis=0) == syms.max(axis=0)).mean(axis=1).mean()
        est = c.gamma + (1 - c.gamma) * float(frac)
        c.last_stderr = (1 - c.gamma) / math.sqrt(n_draws)
        return est
    tot = 0.0
    for i in range(n_draws):
        draw = RandomDraw(field, (i,))
        cfgs = [c.evaluate(k, draw) for k in c.keys]
        tot += sum(len({cf[j] for cf in cfgs}) == 1 for j in range(nv)) / nv
    c.last_stderr = 1.0 / math.sqrt(n_draws)
    return tot / n_draws


def _decode(X: np.ndarray, nv: int, q: int) -> np.ndarray:
    """Base-q digits of support indices: (..., nv) symbol array, V order."""
    out = np.empty(X.shape + (nv,), dtype=np.int8)
    for j in range(nv):
        out[..., j] = (X // q ** (nv - 1 - j)) % q
    return out


def _class_keys(c: GrandCoupling, tau: BoundaryCondition, A) -> list:
    """All keys agreeing with tau outside A."""
    sites = _as_sites(A)
    off = [i for i, v in enumerate(tau.region.vertices) if v not in sites]
    ref = tuple(tau.values[i] for i in off)
    return [k for k in c.keys
            if tuple(k.values[i] for i in off) == ref]


def lambda_tau_A(c: GrandCoupling, tau: BoundaryCondition, A,
                 n_draws: int = 20000,
                 field: rnd.RandomField | None = None) -> float:
    """Average over vertices of the probability that some member of tau's
    A-class disagrees with it at that vertex."""
    sites = _as_sites(A)
    if len(sites) == 0:
        return 0.0
    fam = _class_keys(c, tau, sites)
    nv = len(c.V)
    if c.exact_joint:
        tot = 0.0
        for p, profile in c.exact_atoms(fam):
            bad = sum(len({c.support[i][j] for i in profile}) > 1
                      for j in range(nv))
            tot += p * bad / nv
        return tot
    field = field or rnd.RandomField(0)
    if c.ucols == list(range(nv)) and c.full_product:
        kidx = [c.key_index[k] for k in fam]
        X = c.residual_configs_mc(n_draws, field)[kidx]
        syms = _decode(X, nv, c.nq)
        frac = (syms.min(axis=0) != syms.max(axis=0)).mean(axis=1).mean()
        return (1 - c.gamma) * float(frac)
    tot = 0.0
    for i in range(n_draws):
        draw = RandomDraw(field, (i,))
        cfgs = [c.evaluate(k, draw) for k in fam]
        tot += sum(len({cf[j] for cf in cfgs}) > 1 for j in range(nv)) / nv
    return tot / n_draws


def lambda_psi(c: GrandCoupling, psi: Psi, eta: dict,
               n_draws: int = 20000,
               field: rnd.RandomField | None = None) -> float:
    """Expectation over the coupling of psi of the per-vertex value set
    reachable across boundary conditions compatible with eta."""
    fam = [k for k in c.keys
           if all(k.values[k.region.index(v)] in allowed
                  for v, allowed in eta.items())]
    if not fam:
        raise ValueError("no feasible boundary condition is compatible with eta")
    nv = len(c.V)
    if c.exact_joint:
        tot = 0.0
        for p, profile in c.exact_atoms(fam):
            tot += p * sum(psi({c.support[i][j] for i in profile})
                           for j in range(nv)) / nv
        return tot
    field = field or rnd.RandomField(0)
    tot = 0.0
    for i in range(n_draws):
        draw = RandomDraw(field, (i,))
        cfgs = [c.evaluate(k, draw) for k in fam]
        tot += sum(psi({cf[j] for cf in cfgs}) for j in range(nv)) / nv
    return tot / n_draws


def _popcount(x: np.ndarray) -> np.ndarray:
    if hasattr(np, "bitwise_count"):
        return np.bitwise_count(x)
    table = np.array([bin(i).count("1") for i in range(1 << 16)], dtype=np.int8)
    return table[x & 0xFFFF] + table[(x >> 16) & 0xFFFF]


def contraction_sweep(c: GrandCoupling, A_list, n_draws: int = 8192,
                      field: rnd.RandomField | None = None) -> list:
    """Monte Carlo lambda(tau, A) for many A at once (q = 2, U = V).

    Uses one shared pool of residual-branch samples for every A; within each
    A the keys are grouped into classes (equal off A) and the per-vertex
    disagreement count is the popcount of OR xor AND over class members.
    Returns one record per (class, A).
    """
    if c.nq != 2:
        raise ValueError("fast sweep supports binary alphabets")
    field = field or rnd.RandomField(0)
    nv = len(c.V)
    B = c.keys[0].region
    nb = len(B)
    X = c.residual_configs_mc(n_draws, field).astype(np.uint32)
    tau_vals = np.array([k.values for k in c.keys], dtype=np.int64)
    records = []
    for A in A_list:
        sites = _as_sites(A)
        offpos = [i for i, v in enumerate(B.vertices) if v not in sites]
        class_id = np.zeros(len(c.keys), dtype=np.int64)
        for i in offpos:
            class_id = class_id * 2 + tau_vals[:, i]
        order = np.argsort(class_id, kind="stable")
        m = 2 ** len(sites)
        Xo = X[order].reshape(len(c.keys) // m, m, n_draws)
        diff = np.bitwise_or.reduce(Xo, axis=1) ^ np.bitwise_and.reduce(Xo, axis=1)
        cnt = _popcount(diff).astype(np.float64)
        lam = (1 - c.gamma) * cnt.mean(axis=1) / nv
        se = (1 - c.gamma) * cnt.std(axis=1) / math.sqrt(n_draws) / nv
        bound = len(sites) / nb
        reps = order.reshape(-1, m)[:, 0]
        for g in range(lam.shape[0]):
            records.append({
                "coupling_id": c.coupling_id,
                "tau_hash": tau_hash(c.keys[int(reps[g])]),
                "A": [list(v) for v in sites],
                "lambda": float(lam[g]),
                "stderr": float(se[g]),
                "bound": bound,
                "slack": bound - float(lam[g]),
            })
    return records


def check_contraction(c: GrandCoupling, mode: str = "tau_A",
                      eps_report: bool = False, A_sets=None,
                      n_draws: int = 8192,
                      field: rnd.RandomField | None = None,
                      psi: Psi = psi_one, etas=None):
    """Contraction verdict: lambda(tau, A) < |A|/|boundary| for all tested
    pairs (tau_A mode) or lambda_psi(eta) <= sum psi(eta_v)/|boundary|
    (psi mode). Returns (pass, worst slack); records kept on c.last_records.

    Exhaustive over all (tau, A) in exact-joint mode with A_sets omitted;
    otherwise A_sets is the caller's sampling plan and the result is
    statistical (Monte Carlo).
    """
    B = c.keys[0].region
    nb = len(B)
    records = []
    if mode == "tau_A":
        if A_sets is None:
            if not c.exact_joint:
                raise CapacityError("supply A_sets for a Monte Carlo sweep")
            import itertools
            A_sets = [region(comb, B.dimension)
                      for size in range(1, nb + 1)
                      for comb in itertools.combinations(B.vertices, size)]
        if c.exact_joint:
            for A in A_sets:
                sites = _as_sites(A)
                seen = set()
                for tau in c.keys:
                    off = tuple(tau.values[i] for i, v in
                                enumerate(B.vertices) if v not in sites)
                    if off in seen:
                        continue
                    seen.add(off)
                    lam = lambda_tau_A(c, tau, sites)
                    bound = len(sites) / nb
                    records.append({"coupling_id": c.coupling_id,
                                    "tau_hash": tau_hash(tau),
                                    "A": [list(v) for v in sites],
                                    "lambda": lam, "bound": bound,
                                    "slack": bound - lam})
        else:
            records = contraction_sweep(c, A_sets, n_draws, field)
    elif mode == "psi":
        if etas is None:
            raise ValueError("psi mode needs explicit eta maps")
        for eta in etas:
            lam = lambda_psi(c, psi, eta, n_draws=n_draws, field=field)
            bound = sum(psi(set(a)) if len(a) > 1 else 0.0
                        for a in eta.values()) / nb
            records.append({"coupling_id": c.coupling_id, "tau_hash": "",
                            "A": sorted(map(list, eta)), "lambda": lam,
                            "bound": bound, "slack": bound - lam})
    else:
        raise ValueError(f"unknown mode {mode!r}")
    c.last_records = records
    passed = all(r["slack"] > 0 for r in records)
    worst = min((r["slack"] for r in records), default=math.inf)
    if eps_report and mode == "psi":
        eps = min((1.0 - r["lambda"] * nb / (r["bound"] * nb)
                   for r in records if r["bound"] > 0), default=1.0)
        return passed, worst, eps
    return passed, worst


def diagnostics_json(c: GrandCoupling) -> str:
    return "\n".join(json.dumps(r) for r in c.last_records)


# ---- pairwise three-stage ratio coupling --------------------------------


class PairCoupling:
    """Coupled pair (omega, sigma) with marginals P^tau_V and P^tau2_V.

    Stage 1 maximally couples the marginals on the separating shell B; stage
    2 fills the inside W with variates depending only on the B values, so
    omega_B = sigma_B forces omega_W = sigma_W pathwise; stage 3 fills the
    rest conditionally.
    """

    def __init__(self, spec: Spec, V: Region, U: Region,
                 tau: BoundaryCondition, tau2: BoundaryCondition):
        if not U.issubset(V):
            raise ValueError("U must be contained in V")
        if tau.region.vertices != tau2.region.vertices:
            raise ValueError("boundary conditions must share one region")
        sigma_sites = tuple(v for i, v in enumerate(tau.region.vertices)
                            if tau.values[i] != tau2.values[i])
        self.sigma = Region(sigma_sites, V.dimension) if sigma_sites else None
        if self.sigma is None:
            self.r_star = max(1, min(l1(u, b) for u in U for b in tau.region) // 2)
        else:
            self.r_star = min(l1(u, b) for u in U for b in self.sigma) // 2
        if self.r_star < 1:
            raise ValueError("no separation: r_star < 1")
        self.spec, self.V, self.U = spec, V, U
        self.tau, self.tau2 = tau, tau2
        dU = {v: min(l1(v, u) for u in U) for v in V}
        self.B = Region(tuple(v for v, d in dU.items() if d == self.r_star),
                        V.dimension)
        self.W = Region(tuple(v for v, d in dU.items() if d < self.r_star),
                        V.dimension)
        self.rest = V.difference(self.B).difference(self.W)
        self.q = spec.q
        self._build_tables()

    # -- exact tables ------------------------------------------------------

    def _box_bounds(self):
        xs = [v[0] for v in self.V]
        ys = [v[1] for v in self.V]
        return min(xs), max(xs), min(ys), max(ys)

    def _build_tables(self):
        spec, q = self.spec, self.q
        if self.V.dimension != 2 or q ** len(self.B) > 1 << 14:
            raise CapacityError("pairwise coupling needs a small d=2 instance")
        x0, x1, y0, y1 = self._box_bounds()
        if len(self.V) != (x1 - x0 + 1) * (y1 - y0 + 1):
            raise CapacityError("pairwise coupling implemented for box regions")
        self.dp1 = BoxDP(spec, x0, x1, y0, y1, self.tau)
        self.dp2 = BoxDP(spec, x0, x1, y0, y1, self.tau2)
        self.bcells = sorted(self.B.vertices)
        self.PB1 = self.dp1.marginal_table(self.bcells)
        self.PB2 = self.dp2.marginal_table(self.bcells)
        self.cum1 = np.cumsum(self.PB1)
        self.cum2 = np.cumsum(self.PB2)
        excess = np.maximum(self.PB2 - self.PB1, 0.0)
        self.tv_B = float(excess.sum())
        self.exc_cum = np.cumsum(excess / self.tv_B) if self.tv_B > 0 else None
        with np.errstate(divide="ignore", invalid="ignore"):
            self.ratio21 = np.where(self.PB1 > 0, self.PB2 / np.where(
                self.PB1 > 0, self.PB1, 1.0), np.inf)
        # conditional tables for W given the B values
        self.wcells = sorted(self.W.vertices)
        self.WT_cum = self._w_table_cum()
        self.u_in_w = [self.wcells.index(tuple(u)) for u in self.U]

    def _w_table_cum(self) -> np.ndarray:
        """Cumulative conditional law of the W block for each B config."""
        spec, q = self.spec, self.q
        W, B = self.wcells, self.bcells
        nW, nB = len(W), len(B)
        ncw, ncb = q ** nW, q ** nB
        wsym = _decode(np.arange(ncw), nW, q)  # (ncw, nW)
        bsym = _decode(np.arange(ncb), nB, q)  # (ncb, nB)
        g = LatticeGraph(self.V.dimension)
        w2 = spec.ew * spec.ok
        base = np.prod(spec.vw[wsym], axis=1)
        widx = {v: i for i, v in enumerate(W)}
        bidx = {v: i for i, v in enumerate(B)}
        cross = []  # (w position, b position)
        for v in W:
            for u in g.neighbors(v):
                if u in widx:
                    if u > v:
                        base = base * w2[wsym[:, widx[v]], wsym[:, widx[u]]]
                elif u in bidx:
                    cross.append((widx[v], bidx[u]))
                elif u not in self.V:
                    # outside the box: both taus agree here (off sigma)
                    base = base * w2[wsym[:, widx[v]], self.tau.value_at(u)]
                # neighbors in the outer shell are separated by B, impossible
        table = np.empty((ncb, ncw))
        for b in range(ncb):
            wgt = base.copy()
            for wp, bp in cross:
                wgt = wgt * w2[wsym[:, wp], bsym[b, bp]]
            tot = wgt.sum()
            table[b] = np.cumsum(wgt / tot)
        return table

    # -- sampling ----------------------------------------------------------

    def sample_batch(self, field: rnd.RandomField, n: int, offset: int = 0):
        """n coupled pairs; returns (omega, sigma) as (n, |V|) symbol arrays
        in V's vertex order."""
        draws = offset + np.arange(n, dtype=np.int64)
        u1 = rnd.uniform_array(field, [draws, np.int64(_STAGE_PAIR_B)])
        b1 = np.searchsorted(self.cum1, u1, side="right").clip(max=len(self.cum1) - 1)
        ucoin = rnd.uniform_array(field, [draws, np.int64(_STAGE_PAIR_COIN)])
        coupled = ucoin < np.minimum(1.0, self.ratio21[b1])
        b2 = b1.copy()
        if self.exc_cum is not None:
            uexc = rnd.uniform_array(field, [draws, np.int64(_STAGE_PAIR_EXC)])
            alt = np.searchsorted(self.exc_cum, uexc, side="right").clip(
                max=len(self.exc_cum) - 1)
            b2 = np.where(coupled, b1, alt)
        uw = rnd.uniform_array(field, [draws, np.int64(_STAGE_PAIR_W)])
        w1 = self._sample_w(b1, uw)
        w2_ = self._sample_w(b2, uw)
        omega = self._assemble(field, self.dp1, b1, w1, draws)
        sigma = self._assemble(field, self.dp2, b2, w2_, draws)
        return omega, sigma

    def _sample_w(self, bidx: np.ndarray, u: np.ndarray) -> np.ndarray:
        out = np.empty(len(bidx), dtype=np.int64)
        order = np.argsort(bidx, kind="stable")
        sb = bidx[order]
        starts = np.searchsorted(sb, np.arange(self.WT_cum.shape[0] + 1))
        for b in np.unique(sb):
            sl = order[starts[b]:starts[b + 1]]
            out[sl] = np.searchsorted(self.WT_cum[b], u[sl], side="right")
        return out.clip(max=self.WT_cum.shape[1] - 1)

    def _assemble(self, field, dp, bidx, widx, draws) -> np.ndarray:
        """Fill the outer shell by batched conditional sampling and merge."""
        n = len(draws)
        q = self.q
        bsym = _decode(bidx, len(self.bcells), q)
        wsym = _decode(widx, len(self.wcells), q)
        chunks = []
        step = 1 << 14
        for lo in range(0, n, step):
            hi = min(lo + step, n)
            masks = np.ones((hi - lo, dp.ncols, dp.S), dtype=bool)
            for cells, syms in ((self.bcells, bsym), (self.wcells, wsym)):
                for pos, (cx, cy) in enumerate(cells):
                    j = cx - dp.x0
                    masks[:, j, :] &= (dp.digits[None, :, cy - dp.y0]
                                       == syms[lo:hi, pos, None])
            cols = np.arange(dp.ncols, dtype=np.int64)
            uu = rnd.uniform_array(field, [draws[lo:hi, None],
                                           np.int64(_STAGE_PAIR_REST),
                                           cols[None, :]])
            states = dp.ffbs(masks, uu)
            cfg = np.empty((hi - lo, len(self.V)), dtype=np.int8)
            for i, (x, y) in enumerate(self.V.vertices):
                cfg[:, i] = dp.digits[states[:, x - dp.x0], y - dp.y0]
            chunks.append(cfg)
        return np.concatenate(chunks, axis=0)

    def sample(self, draw: RandomDraw):
        """One coupled pair as configuration tuples on V."""
        idx = draw.prefix[0] if draw.prefix else 0
        omega, sigma = self.sample_batch(draw.field, 1, offset=idx)
        return tuple(int(a) for a in omega[0]), tuple(int(a) for a in sigma[0])

    def exact_u_tv(self) -> float:
        """Exact TV between the two conditional marginals on U."""
        cells = sorted(map(tuple, self.U))
        p1 = self.dp1.marginal_table(cells)
        p2 = self.dp2.marginal_table(cells)
        return 0.5 * float(np.abs(p1 - p2).sum())


def pairwise_ratio_coupling(spec: Spec, V: Region, U: Region,
                            tau: BoundaryCondition,
                            tau2: BoundaryCondition) -> PairCoupling:
    return PairCoupling(spec, V, U, tau, tau2)


# ---- staged contracting coupling on 2d boxes ----------------------------


class ContractingCoupling:
    """Lazy grand coupling of (P^tau on a box of radius n), d = 2.

    Sampling proceeds in stages: the core box of radius n - r first, then
    well-separated faces of the width-r annulus, then the leftover corner
    components. Every vertex is sampled by inverse-CDF of its exact
    conditional (everything unsampled marginalized out) with a uniform
    keyed by (stage, local class values, vertex), so equal nearby values
    reuse the same randomness across boundary conditions.
    """

    def __init__(self, spec: Spec, n: int, r: int, s: int):
        if spec.dimension != 2:
            raise ValueError("contracting coupling is built for d = 2")
        if not (1 <= r < s <= 4 * r <= n):
            raise ValueError("parameters must satisfy 1 <= r < s <= 4r <= n")
        self.spec, self.n, self.r, self.s = spec, n, r, s
        self.V = ball(n, 2)
        self.U = ball(n - r, 2)
        self.faces = self._build_faces()
        face_cells = {v for f in self.faces for v in f}
        leftover = [v for v in self.V if v not in self.U and v not in face_cells]
        self.components = _components(leftover)
        self.coupling_id = format(_fold([n, r, s, spec.q]), "016x")

    def _build_faces(self) -> list:
        n, r, s = self.n, self.r, self.s
        half = n - s
        if 2 * half + 1 < s:
            raise ValueError(
                "no face of length >= s fits after corner separation; "
                "reduce s or increase n")
        segs = _split_segment(-half, half, s)
        faces = []
        for lo, hi in segs:
            faces.append(tuple((x, y) for x in range(lo, hi + 1)
                               for y in range(n - r + 1, n + 1)))          # top
            faces.append(tuple((x, y) for x in range(lo, hi + 1)
                               for y in range(-n, -(n - r + 1) + 1)))      # bottom
            faces.append(tuple((x, y) for y in range(lo, hi + 1)
                               for x in range(n - r + 1, n + 1)))          # right
            faces.append(tuple((x, y) for y in range(lo, hi + 1)
                               for x in range(-n, -(n - r + 1) + 1)))      # left
        for i in range(len(faces)):
            for j in range(i + 1, len(faces)):
                d = min(l1(a, b) for a in faces[i] for b in faces[j])
                if d < s:
                    raise AssertionError("faces are not s-separated")
        return faces

    def evaluate(self, tau: BoundaryCondition, draw: RandomDraw) -> tuple:
        spec, n = self.spec, self.n
        dp = BoxDP(spec, -n, n, -n, n, tau)
        clamps: dict = {}
        # stage 1: the core. All stages share one uniform per vertex across
        # every boundary condition; each vertex is drawn by inverse-CDF of
        # its exact conditional. Within a class (equal values near a face)
        # the conditionals coincide step by step, so equal keys give equal
        # samples; across classes the shared variates are one valid choice
        # of joint law over the per-class marginals.
        _sequential_sample(dp, sorted(self.U.vertices), clamps,
                           lambda i, v: draw.uniform(_STAGE_U, i))
        # stage 2: the separated annulus faces
        for fi, face in enumerate(self.faces):
            _sequential_sample(dp, sorted(face), clamps,
                               lambda i, v, fi=fi:
                               draw.uniform(_STAGE_FACE, fi, i))
        # stage 3: leftover corner components
        for ci, comp in enumerate(self.components):
            _sequential_sample(dp, sorted(comp), clamps,
                               lambda i, v, ci=ci:
                               draw.uniform(_STAGE_COMP, ci, i))
        return tuple(clamps[v] for v in self.V.vertices)


def _nbrs(v):
    (x, y) = v
    return ((x - 1, y), (x + 1, y), (x, y - 1), (x, y + 1))


def _components(cells) -> list:
    remaining = set(cells)
    comps = []
    while remaining:
        seed = min(remaining)
        comp, queue = {seed}, [seed]
        remaining.discard(seed)
        while queue:
            v = queue.pop()
            for u in _nbrs(v):
                if u in remaining:
                    remaining.discard(u)
                    comp.add(u)
                    queue.append(u)
        comps.append(tuple(sorted(comp)))
    return comps


def _split_segment(lo: int, hi: int, s: int) -> list:
    """Cut [lo, hi] into pieces of length in [s, 10s] with gaps >= s."""
    length = hi - lo + 1
    if length <= 10 * s:
        return [(lo, hi)]
    segs = []
    pos = lo
    while hi - pos + 1 >= s:
        end = min(pos + 10 * s - 1, hi)
        if hi - end < 2 * s:  # tail would be unusably short; stop here
            end = hi if hi - pos + 1 <= 10 * s else pos + 10 * s - 1
        segs.append((pos, end))
        pos = end + s + 1
    return segs


def _sequential_sample(dp: BoxDP, cells, clamps: dict, unif) -> None:
    """Sample cells (column-major order) by exact conditionals, in place.

    unif(i, v) supplies the uniform variate for the i-th cell. Conditionals
    marginalize everything unsampled via forward/backward column messages.
    """
    cells = sorted(map(tuple, cells))  # column-major order
    cell_index = {v: i for i, v in enumerate(cells)}
    by_col: dict = {}
    for v in cells:
        by_col.setdefault(v[0], []).append(v)
    # stage-entry clamp masks; post[j] marginalizes all columns right of j
    masks = [dp._col_mask(clamps, x) for x in range(dp.x0, dp.x1 + 1)]
    post = [None] * dp.ncols
    acc = np.ones(dp.S)
    for j in range(dp.ncols - 1, -1, -1):
        post[j] = acc
        acc = dp.T @ (dp.colw[j] * masks[j] * acc)
    fwd = None
    for j in range(dp.ncols):
        x = dp.x0 + j
        pre = np.ones(dp.S) if fwd is None else fwd @ dp.T
        if x in by_col:
            colmask = dp._col_mask(clamps, x).astype(float)
            for v in by_col[x]:
                base = pre * dp.colw[j] * colmask * post[j]
                dig = dp.digits[:, v[1] - dp.y0]
                zs = np.array([base[dig == a].sum() for a in range(dp.q)])
                tot = zs.sum()
                if tot <= 0:
                    raise ValueError("clamps admit no feasible configuration")
                u = unif(cell_index[v], v)
                a = int(np.searchsorted(np.cumsum(zs / tot), u, side="right"))
                a = min(a, dp.q - 1)
                clamps[v] = a
                colmask = colmask * (dig == a)
            fwd = pre * dp.colw[j] * colmask
        else:
            fwd = pre * dp.colw[j] * masks[j]


def contracting_coupling_2d(spec: Spec, n: int, r: int, s: int) -> ContractingCoupling:
    return ContractingCoupling(spec, n, r, s)
