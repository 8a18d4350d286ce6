"""Coupled heat-bath block dynamics and coupling-from-the-past.

Each step n has an activity probability p_n, a base block Delta_n and a
grand coupling of the block conditionals. Active vertices with no other
active vertex within r_n = diam(Delta_n) + 1 are chosen; a chosen vertex
resamples its block through the coupling. Backward composition with
set-valued (bounding-chain) propagation detects coalescence at a vertex
and yields a perfect sample.

Randomness addressing: the activity coin of vertex v at step n reads
address (v, n, TAG_ACTIVE); the coupling for the block at u at step n
draws under the address prefix (u, n). Both are pure reads, so backward
re-composition reuses past randomness exactly.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass

import numpy as np

from . import randomness as rnd
from .coupling import GrandCoupling, RandomDraw
from .lattice import LatticeGraph, Region, ball, boundary, region
from .model import BoundaryCondition, Spec


class CoalescenceTimeout(Exception):
    """Backward chain failed to coalesce within the horizon cap."""

    def __init__(self, msg, set_sizes=None):
        super().__init__(msg)
        self.set_sizes = set_sizes


class Schedule:
    """Per-step dynamics parameters: n -> (p_n, Delta_n, coupling)."""

    def __init__(self, spec: Spec, p, block, coupling_factory, name: str = ""):
        self.spec = spec
        self._p = p if callable(p) else (lambda n, v=float(p): v)
        self._block = block if callable(block) else (lambda n, b=block: b)
        self._factory = coupling_factory
        self._couplings: dict = {}
        self._site_tables: dict = {}
        self.name = name

    def p_at(self, n: int) -> float:
        v = float(self._p(n))
        if not 0.0 < v < 1.0:
            raise ValueError("activity probability must lie strictly in (0,1)")
        return v

    def block_at(self, n: int) -> Region:
        b = self._block(n)
        if (0,) * b.dimension not in b:
            raise ValueError("block must contain the origin")
        return b

    def r_at(self, n: int) -> int:
        return self.block_at(n).diameter() + 1

    def coupling_at(self, n: int):
        key = self.block_at(n).vertices
        if key not in self._couplings:
            self._couplings[key] = self._factory(n)
        return self._couplings[key]

    def site_tables_at(self, n: int):
        key = self.block_at(n).vertices
        if key not in self._site_tables:
            self._site_tables[key] = _SiteTables(self.coupling_at(n))
        return self._site_tables[key]


@dataclass
class SetConfig:
    """Per-vertex non-empty symbol sets on a finite window."""

    sets: dict

    def __post_init__(self):
        for v, s in self.sets.items():
            if not s:
                raise ValueError(f"empty symbol set at {v}")
            self.sets[v] = frozenset(s)

    def determined(self, v) -> bool:
        return len(self.sets[v]) == 1


@dataclass
class CftpResult:
    vertex: tuple
    value: int
    T_v: int
    radius_bound: int
    widened_steps: int
    seed: int
    work: int = 0

    def to_json(self) -> str:
        return json.dumps({"seed": self.seed, "v": list(self.vertex),
                           "T_v": self.T_v, "radius_bound": self.radius_bound,
                           "value": self.value,
                           "widened_steps": self.widened_steps})


def full_symbol_set(spec: Spec) -> frozenset:
    """Symbols with at least one allowed neighbor context (all, by the
    specification's construction rules)."""
    return frozenset(int(a) for a in range(spec.q) if spec.ok[a].any())


def full_setconfig(spec: Spec, window: Region) -> SetConfig:
    full = full_symbol_set(spec)
    return SetConfig({v: full for v in window})


# ---- randomness reads ----------------------------------------------------


def _active(field: rnd.RandomField, v, n: int, p: float) -> bool:
    return field.uniform((tuple(v), n, rnd.TAG_ACTIVE)) < p


def chosen(field: rnd.RandomField, schedule: Schedule, v, n: int,
           graph=None) -> bool:
    """Active at (v, n) with no other active vertex within distance r_n."""
    if n < 1:
        raise ValueError("time index must be >= 1")
    graph = graph or LatticeGraph(schedule.spec.dimension)
    p = schedule.p_at(n)
    r = schedule.r_at(n)
    w = graph.wrap(v)
    if not _active(field, w, n, p):
        return False
    seen = {w}
    for off in ball(r, schedule.spec.dimension):
        u = graph.wrap(tuple(a + b for a, b in zip(v, off)))
        if u in seen:
            continue
        seen.add(u)
        if _active(field, u, n, p):
            return False
    return True


def update_set(field: rnd.RandomField, schedule: Schedule, v, n: int,
               graph=None) -> Region:
    """U_{v,n}: the chosen vertices u with v in u + Delta_n (at most one)."""
    graph = graph or LatticeGraph(schedule.spec.dimension)
    d = schedule.spec.dimension
    cands = {graph.wrap(tuple(a - b for a, b in zip(v, w)))
             for w in schedule.block_at(n)}
    hits = tuple(sorted(u for u in cands if chosen(field, schedule, u, n, graph)))
    return Region(hits, d)


# ---- single update maps --------------------------------------------------


class _SiteTables:
    """Fast evaluation tables for a single-site block coupling.

    Reproduces GrandCoupling.evaluate bit for bit on single-site blocks
    (same searchsorted conventions and the same addressed uniforms)."""

    def __init__(self, gc: GrandCoupling):
        if len(gc.V) != 1:
            raise ValueError("site tables need a single-site block")
        self.gc = gc
        self.q = gc.nq
        self.gamma = gc.gamma
        self.min_cum = gc.min_cum  # over usupport = feasible symbols, sorted
        self.usym = np.array([c[0] for c in gc.usupport], dtype=np.int64)
        rsym = np.zeros((len(gc.keys), self.q))
        np.add.at(rsym, (slice(None), self.usym), gc.R)
        self.Rcum = np.cumsum(rsym, axis=1)  # symbol-indexed residual cdfs
        self.rows = {k.values: i for i, k in enumerate(gc.keys)}

    def _common(self, w: float) -> int:
        a = int(np.searchsorted(self.min_cum, w * self.gamma, side="right"))
        return int(self.usym[min(a, len(self.usym) - 1)])

    def symbol(self, tau_values: tuple, u0: float, w: float, u1: float) -> int:
        if u0 < self.gamma:
            return self._common(w)
        cum = self.Rcum[self.rows[tau_values]]
        a = int(np.searchsorted(cum, u1 * cum[-1], side="right"))
        return min(a, self.q - 1)

    def symbol_set(self, row_list, u0: float, w: float, u1: float) -> frozenset:
        if u0 < self.gamma:
            return frozenset((self._common(w),))
        cums = self.Rcum[row_list]
        syms = (cums <= (u1 * cums[:, -1])[:, None]).sum(axis=1)
        return frozenset(int(a) for a in np.minimum(syms, self.q - 1))


def _block_draw(field: rnd.RandomField, u, n: int) -> RandomDraw:
    return RandomDraw(field, (tuple(u), n))


def _coupling_boundary_region(gc, block: Region) -> Region:
    breg = getattr(gc, "boundary_region", None)
    if breg is not None:
        return breg
    if getattr(gc, "keys", None):
        return gc.keys[0].region
    return boundary(block)


def _boundary_offsets(block: Region):
    return boundary(block).vertices


def _block_tau_values(block_bnd, u, lookup, graph):
    """Boundary values for the block at u read through lookup(vertex)."""
    return tuple(lookup(graph.wrap(tuple(a + b for a, b in zip(u, w))))
                 for w in block_bnd)


def step(config: dict, n: int, field: rnd.RandomField, schedule: Schedule,
         out: Region | None = None, graph=None) -> dict:
    """One forward application of f_n to a configuration on a window.

    config maps window vertices to symbol indices; the result covers `out`
    (defaulting to the whole window, which suits tori). A required vertex
    missing from the window raises an error naming it.
    """
    graph = graph or LatticeGraph(schedule.spec.dimension)
    gc = schedule.coupling_at(n)
    block = schedule.block_at(n)
    breg = _coupling_boundary_region(gc, block)
    bnd = breg.vertices
    if out is None:
        out = Region(tuple(config), schedule.spec.dimension)

    def lookup(w):
        if w not in config:
            raise ValueError(f"window too small: value at {w} required")
        return config[w]

    result = {}
    block_cache: dict = {}
    for v in out:
        vv = graph.wrap(v)
        U = update_set(field, schedule, vv, n, graph)
        if len(U) == 0:
            result[v] = lookup(vv)
            continue
        (u,) = U.vertices
        if u not in block_cache:
            vals = _block_tau_values(bnd, u, lookup, graph)
            tau = BoundaryCondition(breg, vals)
            block_cache[u] = gc.evaluate(tau, _block_draw(field, u, n))
        off = next(w for w in block
                   if graph.wrap(tuple(a + b for a, b in zip(u, w))) == vv)
        result[v] = block_cache[u][block.index(off)]
    return result


def step_sets(sc: SetConfig, n: int, field: rnd.RandomField,
              schedule: Schedule, exhaustion_limit: int = 16,
              out: Region | None = None, graph=None) -> SetConfig:
    """Sound set-valued application of f_n; widening replaces failure."""
    graph = graph or LatticeGraph(schedule.spec.dimension)
    spec = schedule.spec
    gc = schedule.coupling_at(n)
    block = schedule.block_at(n)
    breg = _coupling_boundary_region(gc, block)
    full = full_symbol_set(spec)
    if out is None:
        out = Region(tuple(sc.sets), spec.dimension)

    def sets_at(w):
        return sc.sets.get(w, full)

    result = {}
    block_cache: dict = {}
    for v in out:
        vv = graph.wrap(v)
        U = update_set(field, schedule, vv, n, graph)
        if len(U) == 0:
            result[v] = sets_at(vv)
            continue
        (u,) = U.vertices
        if u not in block_cache:
            block_cache[u] = _block_outcome_sets(
                gc, block, breg, u, sets_at, graph,
                _block_draw(field, u, n), exhaustion_limit, full)
        off = next(w for w in block
                   if graph.wrap(tuple(a + b for a, b in zip(u, w))) == vv)
        result[v] = block_cache[u][block.index(off)]
    return SetConfig(result)


def _block_outcome_sets(gc, block, breg, u, sets_at, graph, draw,
                        exhaustion_limit, full):
    """Per-block-vertex outcome sets over all compatible boundary conditions,
    or full sets when too many boundary sites are undetermined (widening)."""
    site_sets = [sorted(sets_at(graph.wrap(tuple(a + b for a, b in zip(u, w)))))
                 for w in breg]
    undetermined = sum(len(s) > 1 for s in site_sets)
    if undetermined > exhaustion_limit:
        return [full] * len(block)
    outs = [set() for _ in block]
    found = False
    for vals in itertools.product(*site_sets):
        tau = BoundaryCondition(breg, vals)
        if tau not in gc.key_index:
            continue
        found = True
        cfg = gc.evaluate(tau, draw)
        for i in range(len(block)):
            outs[i].add(cfg[i])
    if not found:
        # no compatible feasible boundary (possible only for unreachable
        # set-configs); widen soundly
        return [full] * len(block)
    return [frozenset(o) for o in outs]


# ---- coalescence engines -------------------------------------------------


class _LazyChain:
    """Memoized per-vertex set evaluation of a composed step sequence."""

    def __init__(self, spec, schedule, field, graph, exhaustion_limit):
        self.spec, self.schedule, self.field = spec, schedule, field
        self.graph = graph or LatticeGraph(spec.dimension)
        self.limit = exhaustion_limit
        self.full = full_symbol_set(spec)
        self.memo: dict = {}
        self.blocks: dict = {}
        self.chosen_memo: dict = {}
        self.widened = 0
        self.work = 0

    def _chosen(self, u, n):
        key = (u, n)
        if key not in self.chosen_memo:
            self.chosen_memo[key] = chosen(self.field, self.schedule, u, n,
                                           self.graph)
        return self.chosen_memo[key]

    def _update_site(self, v, n):
        """The unique chosen u with v in u + Delta_n, or None."""
        block = self.schedule.block_at(n)
        cands = {self.graph.wrap(tuple(a - b for a, b in zip(v, w)))
                 for w in block}
        hits = [u for u in cands if self._chosen(u, n)]
        self.work += 1
        return hits[0] if hits else None

    def _block_sets(self, u, n, neighbor_sets_at):
        key = (u, n)
        if key not in self.blocks:
            gc = self.schedule.coupling_at(n)
            block = self.schedule.block_at(n)
            breg = _coupling_boundary_region(gc, block)
            bnd = breg.vertices
            if len(block) == 1:
                st = self.schedule.site_tables_at(n)
                vals_sets = [sorted(neighbor_sets_at(self.graph.wrap(
                    tuple(a + b for a, b in zip(u, w))))) for w in bnd]
                und = sum(len(s) > 1 for s in vals_sets)
                if und > self.limit:
                    self.widened += 1
                    self.blocks[key] = [self.full]
                else:
                    rows = [st.rows[vals] for vals in
                            itertools.product(*vals_sets) if vals in st.rows]
                    draw = _block_draw(self.field, u, n)
                    u0 = draw.uniform(rnd.TAG_SELECT)
                    w0 = draw.uniform(rnd.TAG_COMMON)
                    u1 = draw.uniform(rnd.TAG_RESIDUAL, 0)
                    self.blocks[key] = [st.symbol_set(rows, u0, w0, u1)
                                        if rows else self.full]
            else:
                outs = _block_outcome_sets(
                    gc, block, breg, u, neighbor_sets_at, self.graph,
                    _block_draw(self.field, u, n), self.limit, self.full)
                got_widened = all(o == self.full for o in outs)
                if got_widened:
                    self.widened += 1
                self.blocks[key] = outs
        return self.blocks[key]


class _BackwardChain(_LazyChain):
    """Sets after applying f_horizon, ..., f_k (omega^n backward order)."""

    def __init__(self, spec, schedule, field, horizon, graph, limit):
        super().__init__(spec, schedule, field, graph, limit)
        self.horizon = horizon

    def sets(self, v, k):
        v = self.graph.wrap(v)
        if k > self.horizon:
            return self.full
        key = (v, k)
        if key in self.memo:
            return self.memo[key]
        m = k
        while m <= self.horizon:
            if (v, m) in self.memo:
                res = self.memo[(v, m)]
                break
            u = self._update_site(v, m)
            if u is not None:
                outs = self._block_sets(u, m, lambda w: self.sets(w, m + 1))
                block = self.schedule.block_at(m)
                off = next(w for w in block if self.graph.wrap(
                    tuple(a + b for a, b in zip(u, w))) == v)
                res = outs[block.index(off)] if len(outs) > 1 else outs[0]
                break
            m += 1
        else:
            res = self.full
        for j in range(k, m + 1):
            self.memo[(v, j)] = res
        return res


class _ForwardChain(_LazyChain):
    """Sets after applying f_m o ... o f_1 (forward order); time 0 = full."""

    def sets(self, v, m):
        v = self.graph.wrap(v)
        if m <= 0:
            return self.full
        key = (v, m)
        if key in self.memo:
            return self.memo[key]
        k = m
        while k >= 1:
            if (v, k) in self.memo:
                res = self.memo[(v, k)]
                break
            u = self._update_site(v, k)
            if u is not None:
                outs = self._block_sets(u, k, lambda w: self.sets(w, k - 1))
                block = self.schedule.block_at(k)
                off = next(w for w in block if self.graph.wrap(
                    tuple(a + b for a, b in zip(u, w))) == v)
                res = outs[block.index(off)] if len(outs) > 1 else outs[0]
                break
            k -= 1
        else:
            res = self.full
        for j in range(k, m + 1):
            self.memo[(v, j)] = res
        return res


def cftp_value(spec: Spec, schedule: Schedule, field: rnd.RandomField,
               v, horizon_cap: int = 4096, graph=None,
               exhaustion_limit: int = 16) -> CftpResult:
    """Perfect sample at v by backward composition with doubling horizons.

    Each horizon recomputes from scratch (randomness re-reads are free);
    once a coalescing horizon is found, bisection locates the least one.
    """
    v = tuple(v)
    full = full_symbol_set(spec)
    if len(full) == 1:
        return CftpResult(v, next(iter(full)), 0, 0, 0, field.seed)

    def probe(n):
        chain = _BackwardChain(spec, schedule, field, n, graph,
                               exhaustion_limit)
        s = chain.sets(v, 1)
        return s, chain

    n = 1
    last_fail = 0
    while True:
        s, chain = probe(n)
        if len(s) == 1:
            break
        last_fail = n
        if n >= horizon_cap:
            raise CoalescenceTimeout(
                f"no coalescence at {v} within horizon {horizon_cap}",
                set_sizes={v: len(s)})
        n = min(2 * n, horizon_cap)
    lo, hi = last_fail, n  # least coalescing horizon in (lo, hi]
    best = (s, chain)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        s_mid, chain_mid = probe(mid)
        if len(s_mid) == 1:
            hi, best = mid, (s_mid, chain_mid)
        else:
            lo = mid
    s, chain = best
    T = hi
    rb = 2 * sum(schedule.r_at(i) for i in range(1, T + 1))
    return CftpResult(v, next(iter(s)), T, rb, chain.widened, field.seed,
                      work=chain.work)


def forward_coalescence_sample(spec: Spec, schedule: Schedule,
                               field: rnd.RandomField, v,
                               horizon_cap: int = 4096, graph=None,
                               exhaustion_limit: int = 16) -> int:
    """First n at which the forward set chain is a singleton at v
    (distributed as T_v for constant schedules). Returns -1 when censored
    at the horizon cap."""
    v = tuple(v)
    chain = _ForwardChain(spec, schedule, field, graph, exhaustion_limit)
    if len(chain.full) == 1:
        return 0
    for n in range(1, horizon_cap + 1):
        if len(chain.sets(v, n)) == 1:
            return n
    return -1


# ---- vectorized engines (binary alphabets, single-site blocks, d = 2) -----


class _BinarySiteEngine:
    """Shared precomputation for the vectorized single-site engines.

    Residual thresholds t_tau = P_R(symbol 0 | tau) are tabulated per
    neighbor-set code (two bits per neighbor, in boundary-offset order):
    under the shared residual uniform u1, symbol 0 is emitted by some
    compatible tau iff u1 < max_t and symbol 1 iff u1 >= min_t.
    """

    def __init__(self, spec: Spec):
        from .coupling import optimal_grand_coupling
        if spec.q != 2:
            raise ValueError("vectorized engines support binary alphabets")
        if spec.dimension != 2:
            raise ValueError("vectorized engines support d = 2")
        o = region([(0, 0)])
        self.gc = optimal_grand_coupling(spec, o, o)
        self.st = _SiteTables(self.gc)
        self.bnd = _boundary_offsets(o)  # 4 offsets, deterministic order
        st = self.st
        ncodes = 4 ** len(self.bnd)
        self.min_t = np.full(ncodes, np.inf)
        self.max_t = np.full(ncodes, -np.inf)
        for code in range(ncodes):
            masks = [(code >> (2 * j)) & 3 for j in range(len(self.bnd))]
            if any(m == 0 for m in masks):
                continue
            choices = [[a for a in (0, 1) if m >> a & 1] for m in masks]
            rows = [st.rows[vals] for vals in itertools.product(*choices)
                    if vals in st.rows]
            if rows:
                with np.errstate(invalid="ignore"):
                    # all-zero residual rows (gamma = 1) are never consulted
                    ts = st.Rcum[rows, 0] / st.Rcum[rows, -1]
                self.min_t[code] = ts.min()
                self.max_t[code] = ts.max()

    def update(self, h_ev, k, codes):
        """New set bitmasks for chosen sites: h_ev are partial hashes with
        replica and coordinates absorbed (see _site_hashes), aligned with
        the neighbor-set codes; k is the time index. Bit a of the result =
        symbol a attainable."""
        st = self.st
        kw = np.int64(k)
        u0 = rnd.state_uniform(
            rnd.extend_state(h_ev, kw, np.int64(rnd.TAG_SELECT)))
        new = np.empty(len(h_ev), dtype=np.int8)
        com = u0 < st.gamma
        if com.any():
            w = rnd.state_uniform(
                rnd.extend_state(h_ev[com], kw, np.int64(rnd.TAG_COMMON)))
            a = np.searchsorted(st.min_cum, w * st.gamma, side="right")
            sym = st.usym[np.minimum(a, len(st.usym) - 1)]
            new[com] = (1 << sym).astype(np.int8)
        res = ~com
        if res.any():
            u1 = rnd.state_uniform(
                rnd.extend_state(h_ev[res], kw, np.int64(rnd.TAG_RESIDUAL),
                                 np.int64(0)))
            cr = codes[res]
            b0 = (u1 < self.max_t[cr])   # some compatible tau emits 0
            b1 = (u1 >= self.min_t[cr])  # some compatible tau emits 1
            new[res] = b0.astype(np.int8) | (b1.astype(np.int8) << 1)
        return new, com


def _site_hashes(field, draws, coords) -> np.ndarray:
    """Partial hashes (ndraws, nsites) with replica + coordinates absorbed."""
    return rnd.extend_state(rnd.hash_state(field, draws)[:, None],
                            coords[None, :, 0], coords[None, :, 1])


def _chosen_table(hxy, steps_lo, steps_hi, excl_ext, p, n_core):
    """Chosen indicators, (ndraws, nsteps, n_core) for steps in
    (steps_lo, steps_hi]. hxy covers core sites plus the exclusion ring
    (partial hashes from _site_hashes); excl_ext indexes into that
    extended list."""
    nd, ns_ext = hxy.shape
    H = steps_hi - steps_lo
    act = np.empty((nd, H, ns_ext), dtype=bool)
    slab = max(16, (1 << 22) // max(1, nd * ns_ext))
    for lo in range(0, H, slab):
        hi = min(H, lo + slab)
        steps = np.arange(steps_lo + 1 + lo, steps_lo + 1 + hi,
                          dtype=np.int64)
        h = rnd.extend_state(hxy[:, None, :], steps[None, :, None],
                             np.int64(rnd.TAG_ACTIVE))
        act[:, lo:hi, :] = rnd.state_bernoulli(h, p)
    # accumulate the exclusion ring column by column instead of gathering
    # a (nd, H, n_core, ring) block at once
    ex = act[:, :, excl_ext[:, 0]].copy()
    for j in range(1, excl_ext.shape[1]):
        ex |= act[:, :, excl_ext[:, j]]
    return act[:, :, :n_core] & ~ex


def cftp_torus_batch(spec: Spec, torus, field: rnd.RandomField,
                     n_draws: int, p: float = 0.5,
                     horizon_cap: int = 1 << 20,
                     start_horizon: int = 512,
                     censor: bool = False) -> np.ndarray:
    """Full-torus perfect samples, vectorized across draws.

    Binary alphabets, single-site blocks, d = 2 tori. Draw i reads the
    substream field.split(i); results agree bit for bit with the scalar
    backward engine on the same substream. Returns an (n_draws, n_sites)
    symbol array in torus vertex order. Never widened (at most 2d
    undetermined boundary sites per block). With censor=True, draws that
    do not coalesce within horizon_cap come back filled with -1 instead
    of raising.
    """
    eng = _BinarySiteEngine(spec)
    sites = list(torus.vertices())
    ns = len(sites)
    sidx = {v: i for i, v in enumerate(sites)}
    nbr = np.array([[sidx[torus.wrap(tuple(a + b for a, b in zip(v, w)))]
                     for w in eng.bnd] for v in sites])
    excl = np.array([[sidx[u] for u in sorted(
        {torus.wrap(tuple(a + b for a, b in zip(v, w)))
         for w in ball(1, 2)} - {v})] for v in sites])
    coords = (np.array(sites, dtype=np.int64) & 0xFFFFFFFF)
    out = np.empty((n_draws, ns), dtype=np.int8)
    budget = 1 << 28  # cached chosen-table bools per chunk
    chunk = 1024
    for lo in range(0, n_draws, chunk):
        idx = np.arange(lo, min(lo + chunk, n_draws), dtype=np.int64)
        hxy = _site_hashes(field, idx, coords)
        # step k's randomness depends only on its backward index, so the
        # chosen table for steps 1..H carries over when H doubles; cache
        # it per chunk (dropping the cache when it would exceed the
        # memory budget) instead of recomputing the shared prefix
        cho = None
        h_prev, H = 0, start_horizon
        while len(idx):
            if H > horizon_cap:
                if censor:
                    out[idx] = -1
                    break
                raise CoalescenceTimeout(
                    f"{len(idx)} draws uncoalesced at horizon {horizon_cap}")
            if len(idx) * H * ns <= budget:
                if cho is None:
                    cho = _chosen_table(hxy, 0, H, excl, p, ns)
                else:
                    cho = np.concatenate(
                        [cho, _chosen_table(hxy, h_prev, H, excl, p, ns)],
                        axis=1)
                done, cfgs = _torus_sweep(eng, hxy, cho, H, nbr)
            else:
                cho = None
                sub = max(64, budget // (H * ns))
                done = np.zeros(len(idx), dtype=bool)
                parts = []
                for s in range(0, len(idx), sub):
                    tb = _chosen_table(hxy[s:s + sub], 0, H, excl, p, ns)
                    d, cf = _torus_sweep(eng, hxy[s:s + sub], tb, H, nbr)
                    done[s:s + sub] = d
                    parts.append(cf)
                cfgs = np.concatenate(parts, axis=0)
            out[idx[done]] = cfgs
            keep = ~done
            idx, hxy = idx[keep], hxy[keep]
            if cho is not None:
                cho = cho[keep]
            h_prev, H = H, 2 * H
    return out


def _torus_sweep(eng, hxy, cho, H, nbr):
    nd, ns = hxy.shape
    state = np.full((nd, ns), 3, dtype=np.int8)  # bitmask over {0, 1}
    shifts = (2 * np.arange(nbr.shape[1], dtype=np.int64))
    for k in range(H, 0, -1):
        m = cho[:, k - 1, :]
        if not m.any():
            continue
        di, si = np.nonzero(m)
        # neighbor sets read pre-update (chosen sites are >= 2 apart)
        codes = (state[di[:, None], nbr[si]].astype(np.int64)
                 << shifts).sum(axis=1)
        new, _ = eng.update(hxy[di, si], k, codes)
        state[di, si] = new
    done = ((state & (state - 1)) == 0).all(axis=1)
    cfgs = (state[done] >> 1).astype(np.int8)  # bitmask 1 -> 0, 2 -> 1
    return done, cfgs


def coalescence_tail_batch(spec: Spec, field: rnd.RandomField,
                           n_replicas: int, p: float = 0.5,
                           horizon_cap: int = 1 << 16,
                           radius: int = 4) -> np.ndarray:
    """Forward coalescence times at the origin on Z^2, vectorized.

    Binary alphabets, single-site blocks. Replica i reads field.split(i)
    and the result equals forward_coalescence_sample on that substream
    (cross-checked by the test suite). Exactness on the finite working
    window is certified per replica by contamination tracking: a site's
    set is exact unless a residual-branch update read a contaminated or
    off-window neighbor before the origin first coalesced; contaminated
    replicas are rerun on a doubled window (a scalar fallback finishes any
    stragglers). Returns an int64 array of times; -1 marks draws censored
    at the horizon cap.
    """
    eng0 = _BinarySiteEngine(spec)  # validates model shape early
    if eng0.st.gamma >= 1.0:
        # interaction-free: every update is common-branch, so the origin
        # coalesces exactly at its first chosen time
        return _first_chosen_batch(field, n_replicas, p, horizon_cap)
    out = np.full(n_replicas, -2, dtype=np.int64)
    # chunk the replicas so the per-block hash tensor (len x 64 steps x
    # extended window, int64) stays within a fixed memory budget; replica
    # i always reads the same addressed stream, so chunking cannot change
    # any result
    chunk = max(1024, (1 << 26) // ((2 * radius + 3) ** 2 * 64))
    for lo in range(0, n_replicas, chunk):
        pending = np.arange(lo, min(lo + chunk, n_replicas), dtype=np.int64)
        R = radius
        while len(pending) and R <= 64:
            eng = _BinarySiteEngine(spec)
            times = _window_tail_run(spec, eng, field, pending, p,
                                     horizon_cap, R)
            good = times > -2
            out[pending[good]] = times[good]
            pending = pending[~good]
            R *= 2
        for i in pending:  # deep contamination: exact scalar fallback
            o = region([(0, 0)])
            sched = Schedule(spec, p, o,
                             lambda n, e=_BinarySiteEngine(spec): e.gc)
            out[i] = forward_coalescence_sample(
                spec, sched, field.split(int(i)), (0, 0),
                horizon_cap=horizon_cap)
    return out


def _first_chosen_batch(field, n_replicas, p, horizon_cap):
    """First times the origin is chosen (single-site blocks, r = 1)."""
    sites = sorted(ball(1, 2))
    coords = np.array(sites, dtype=np.int64) & 0xFFFFFFFF
    self_col = sites.index((0, 0))
    other = [j for j in range(len(sites)) if j != self_col]
    out = np.full(n_replicas, -1, dtype=np.int64)
    live = np.arange(n_replicas, dtype=np.int64)
    live_pos = live.copy()
    hxy = _site_hashes(field, live, coords)
    block, n = 256, 0
    while len(live) and n < horizon_cap:
        hi = min(horizon_cap, n + block)
        steps = np.arange(n + 1, hi + 1, dtype=np.int64)
        h = rnd.extend_state(hxy[:, None, :], steps[None, :, None],
                             np.int64(rnd.TAG_ACTIVE))
        act = rnd.state_bernoulli(h, p)
        cho = act[:, :, self_col] & ~act[:, :, other].any(axis=2)
        hit = cho.any(axis=1)
        out[live_pos[hit]] = n + 1 + cho[hit].argmax(axis=1)
        live, live_pos, hxy = live[~hit], live_pos[~hit], hxy[~hit]
        n = hi
    return out


def _window_tail_run(spec, eng, field, reps, p, horizon_cap, R):
    """One vectorized forward pass on the window [-R, R]^2; returns first
    singleton times at the origin (-1 censored, -2 contaminated)."""
    sites = [(x, y) for x in range(-R, R + 1) for y in range(-R, R + 1)]
    ns = len(sites)
    sidx = {v: i for i, v in enumerate(sites)}
    center = sidx[(0, 0)]
    # extended site list: window plus the distance-1 ring (for exclusion)
    ext = list(sites)
    for v in sites:
        for w in ball(1, 2):
            u = (v[0] + w[0], v[1] + w[1])
            if u not in sidx:
                sidx[u] = len(ext)
                ext.append(u)
    coords = np.array(ext, dtype=np.int64) & 0xFFFFFFFF
    OUT = ns  # sentinel column index: off-window neighbor
    nbr = np.empty((ns, len(eng.bnd)), dtype=np.int64)
    for i, v in enumerate(sites):
        for j, w in enumerate(eng.bnd):
            u = (v[0] + w[0], v[1] + w[1])
            nbr[i, j] = sidx[u] if (u in sidx and sidx[u] < ns) else OUT
    excl = np.array([[sidx[(v[0] + w[0], v[1] + w[1])]
                      for w in ball(1, 2) if w != (0, 0)] for v in sites])
    shifts = 2 * np.arange(nbr.shape[1], dtype=np.int64)

    result = np.full(len(reps), -1, dtype=np.int64)
    live = reps.copy()
    live_pos = np.arange(len(reps))
    hxy = _site_hashes(field, live, coords)
    state = np.full((len(reps), ns + 1), 3, dtype=np.int8)
    cont = np.zeros((len(reps), ns + 1), dtype=bool)
    cont[:, OUT] = True
    bad = np.zeros(len(reps), dtype=bool)
    recorded = np.zeros(len(reps), dtype=bool)
    block = 64
    n = 0
    while len(live) and n < horizon_cap:
        hi = min(horizon_cap, n + block)
        cho = _chosen_table(hxy, n, hi, excl, p, ns)
        for k in range(n + 1, hi + 1):
            m = cho[:, k - n - 1, :]
            if m.any():
                di, si = np.nonzero(m)
                codes = (state[di[:, None], nbr[si]].astype(np.int64)
                         << shifts).sum(axis=1)
                new, com = eng.update(hxy[di, si], k, codes)
                ncont = ~com & cont[di[:, None], nbr[si]].any(axis=1)
                state[di, si] = new
                cont[di, si] = ncont
            bad |= cont[:, center]
            fin = (((state[:, center] & (state[:, center] - 1)) == 0)
                   & ~recorded)
            if fin.any():
                result[live_pos[fin & ~bad]] = k
                result[live_pos[fin & bad]] = -2
                recorded |= fin
        keep = ~recorded
        if not keep.all():
            live, live_pos, hxy = live[keep], live_pos[keep], hxy[keep]
            state, cont, bad = state[keep], cont[keep], bad[keep]
            recorded = recorded[keep]
        n = hi
    return result
