"""Experiment orchestration: validated configs, the four report commands,
and plot-ready serialization (JSON reports, JSON-lines per-draw records,
CSV tables). Every artifact embeds the config hash, seed, and package
version; reruns with an identical config are bit-identical.
"""

from __future__ import annotations

import concurrent.futures
import configparser
import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field as dfield
from fractions import Fraction

import numpy as np
from scipy.stats import beta as beta_dist, chi2

from . import dynamics as dyn, exactgibbs, randomness as rnd, schedules
from .coupling import (check_contraction, coincidence_probability,
                       diagnostics_json, kappa, optimal_grand_coupling)
from .lattice import Torus, ball, region
from .model import BoundaryCondition, Spec, is_interaction_free, make_model

try:
    from importlib.metadata import version as _pkg_version
    VERSION = _pkg_version("artifact")
except Exception:  # pragma: no cover - not installed
    VERSION = "unknown"


# ---- configuration -------------------------------------------------------

_RUN_KEYS = ("seed", "replicas", "out", "substrate", "horizon_cap",
             "exhaustion_limit", "workers")


@dataclass
class ExperimentConfig:
    """Validated experiment description (model built eagerly to fail fast)."""

    model_name: str
    model_params: dict
    dimension: int
    substrate: str            # "torus:WxH" or "window"
    schedule_kind: str        # "fixed" or "growing"
    schedule_params: dict
    seed: int
    replicas: int
    out: str
    horizon_cap: int
    exhaustion_limit: int
    workers: int
    significance: float
    min_expected: float
    p_c: float | None
    mixing_sizes: tuple
    spec: Spec = dfield(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not 0 <= self.seed < 1 << 64:
            raise ValueError("seed must fit in 64 bits")
        if self.replicas < 1:
            raise ValueError("replicas must be positive")
        if self.horizon_cap < 1 or self.exhaustion_limit < 1:
            raise ValueError("caps must be positive")
        if self.workers < 1:
            raise ValueError("workers must be positive")
        if not 0 < self.significance < 1:
            raise ValueError("significance must lie in (0, 1)")
        if self.substrate != "window":
            self.torus_sides()  # validates the torus syntax eagerly
        if self.schedule_kind not in ("fixed", "growing"):
            raise ValueError(f"unknown schedule kind {self.schedule_kind!r}")
        self.spec = make_model(self.model_name, self.model_params,
                               self.dimension)

    def torus_sides(self) -> tuple:
        head, _, tail = self.substrate.partition(":")
        if head != "torus" or not tail:
            raise ValueError(f"bad substrate {self.substrate!r}; expected "
                             "torus:WxH or window")
        sides = tuple(int(t) for t in tail.lower().split("x"))
        if len(sides) != self.dimension:
            raise ValueError("torus sides must match the model dimension")
        return sides

    def canonical(self) -> str:
        items = {
            "model": self.model_name,
            "params": sorted(self.model_params.items()),
            "d": self.dimension,
            "substrate": self.substrate,
            "schedule": self.schedule_kind,
            "schedule_params": sorted(self.schedule_params.items()),
            "seed": self.seed,
            "replicas": self.replicas,
            "horizon_cap": self.horizon_cap,
            "exhaustion_limit": self.exhaustion_limit,
            "significance": self.significance,
            "min_expected": self.min_expected,
            "p_c": self.p_c,
            "mixing_sizes": list(self.mixing_sizes),
        }
        return json.dumps(items, sort_keys=True, default=str)

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]

    def meta(self) -> dict:
        return {"config_hash": self.hash(), "seed": self.seed,
                "version": VERSION}


def load_config(text: str | None = None, overrides: dict | None = None
                ) -> ExperimentConfig:
    """Build a validated config from flat INI text plus CLI overrides.

    Sections: [model] (name, d, remaining keys are model parameters),
    [schedule] (kind plus parameters), [run] (seed, replicas, out,
    substrate, horizon_cap, exhaustion_limit, workers), [tests]
    (significance, min_expected, p_c, mixing_sizes).
    """
    cp = configparser.ConfigParser()
    if text:
        cp.read_string(text)
    ov = overrides or {}

    def get(section, key, default):
        if key in ov and ov[key] is not None:
            return ov[key]
        if cp.has_option(section, key):
            return cp.get(section, key)
        return default

    model = dict(cp["model"]) if cp.has_section("model") else {}
    name = model.pop("name", "potts")
    d = int(model.pop("d", 2))
    params = {k: _parse_scalar(v) for k, v in model.items()}
    sched = dict(cp["schedule"]) if cp.has_section("schedule") else {}
    kind = sched.pop("kind", "fixed")
    sched_params = {k: _parse_scalar(v) for k, v in sched.items()}
    sizes = str(get("tests", "mixing_sizes", "1"))
    p_c = get("tests", "p_c", None)
    return ExperimentConfig(
        model_name=name, model_params=params, dimension=d,
        substrate=str(get("run", "substrate", "window")),
        schedule_kind=kind, schedule_params=sched_params,
        seed=int(get("run", "seed", 0)),
        replicas=int(get("run", "replicas", 1000)),
        out=str(get("run", "out", "")),
        horizon_cap=int(get("run", "horizon_cap", 1 << 20)),
        exhaustion_limit=int(get("run", "exhaustion_limit", 16)),
        workers=int(get("run", "workers", 1)),
        significance=float(get("tests", "significance", 1e-3)),
        min_expected=float(get("tests", "min_expected", 5.0)),
        p_c=None if p_c in (None, "") else float(p_c),
        mixing_sizes=tuple(int(t) for t in sizes.split(",") if t.strip()),
    )


def _parse_scalar(v: str):
    s = v.strip()
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        pass
    if "/" in s:
        try:
            return Fraction(s)
        except ValueError:
            pass
    return s


# ---- statistics helpers --------------------------------------------------

def chi_square_pooled(counts: np.ndarray, probs: np.ndarray,
                      min_expected: float = 5.0) -> dict:
    """Goodness-of-fit chi-square with cells pooled (smallest expected
    first) until every pooled cell has expected count >= min_expected."""
    counts = np.asarray(counts, dtype=float)
    probs = np.asarray(probs, dtype=float)
    n = counts.sum()
    expected = probs * n
    order = np.argsort(expected, kind="stable")
    groups, cur_c, cur_e = [], 0.0, 0.0
    for i in order:
        cur_c += counts[i]
        cur_e += expected[i]
        if cur_e >= min_expected:
            groups.append((cur_c, cur_e))
            cur_c = cur_e = 0.0
    if cur_e > 0:
        if groups:
            c0, e0 = groups.pop()
            groups.append((c0 + cur_c, e0 + cur_e))
        else:
            groups.append((cur_c, cur_e))
    stat = math.fsum((c - e) ** 2 / e for c, e in groups)
    dof = max(len(groups) - 1, 1)
    return {"stat": stat, "dof": dof,
            "pvalue": float(chi2.sf(stat, dof)), "cells": len(groups)}


def tv_empirical(counts: np.ndarray, probs: np.ndarray) -> float:
    counts = np.asarray(counts, dtype=float)
    n = counts.sum()
    return 0.5 * float(np.abs(counts / n - np.asarray(probs)).sum())


def _wilson_interval(k: int, n: int, z: float = 1.96) -> tuple:
    if n == 0:
        return 0.0, 1.0
    p = k / n
    den = 1 + z * z / n
    mid = (p + z * z / (2 * n)) / den
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / den
    return max(mid - half, 0.0), min(mid + half, 1.0)


@dataclass(frozen=True)
class TailTable:
    """Empirical survival curve of the coalescence time with a geometric
    (log-linear) fit. rows: (n, survivors, pr_hat, ci_lo, ci_hi)."""

    rows: tuple
    slope: float
    slope_sigma: float
    residual: float
    n_observed: int
    n_censored: int

    def __post_init__(self):
        surv = [r[1] for r in self.rows]
        if any(a < b for a, b in zip(surv, surv[1:])):
            raise ValueError("survivors must be non-increasing")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["n", "survivors", "pr_hat", "ci_lo", "ci_hi"])
        for r in self.rows:
            w.writerow([r[0], r[1], repr(r[2]), repr(r[3]), repr(r[4])])
        return buf.getvalue()

    def to_json(self) -> dict:
        return {"slope": self.slope, "slope_sigma": self.slope_sigma,
                "residual": self.residual, "n_observed": self.n_observed,
                "n_censored": self.n_censored, "rows": len(self.rows)}


def tail_table(times: np.ndarray, fit_floor: float = 1e-3,
               n_boot: int = 200, boot_seed: int = 1) -> TailTable:
    """Survival table from coalescence times; -1 entries are censored and
    excluded from every statistic (reported as a count). The geometric fit
    regresses log Pr-hat(T > n) on n over rows with Pr-hat >= fit_floor;
    slope_sigma is a nonparametric bootstrap standard deviation."""
    times = np.asarray(times, dtype=np.int64)
    obs = times[times >= 0]
    n_cens = int((times < 0).sum())
    if len(obs) == 0:
        raise ValueError("no uncensored draws to tabulate")
    m = int(obs.max())
    counts = np.bincount(obs, minlength=m + 1)
    survivors = len(obs) - np.cumsum(counts)  # survivors[n] = #(T > n)
    ns = np.arange(m + 1)
    rows = []
    for n in ns:
        k = int(survivors[n])
        lo, hi = _wilson_interval(k, len(obs))
        rows.append((int(n), k, k / len(obs), lo, hi))

    def fit(surv_counts, total):
        pr = surv_counts / total
        keep = (pr >= fit_floor) & (surv_counts > 0)
        xs = ns[keep]
        if len(xs) < 2:
            return 0.0, 0.0
        ys = np.log(pr[keep])
        A = np.vstack([xs, np.ones(len(xs))]).T
        coef, res, _, _ = np.linalg.lstsq(A, ys, rcond=None)
        rms = math.sqrt(res[0] / len(xs)) if len(res) else 0.0
        return float(coef[0]), rms

    slope, rms = fit(survivors.astype(float), len(obs))
    rng = np.random.default_rng(boot_seed)
    slopes = []
    for _ in range(n_boot):
        res = rng.choice(obs, size=len(obs), replace=True)
        cnt = np.bincount(res, minlength=m + 1)[:m + 1]
        sv = len(res) - np.cumsum(cnt)
        slopes.append(fit(sv.astype(float), len(res))[0])
    sigma = float(np.std(slopes)) if slopes else 0.0
    return TailTable(tuple(rows), slope, sigma, rms, len(obs), n_cens)


# ---- schedule construction from config -----------------------------------

def build_schedule(cfg: ExperimentConfig):
    """Dynamics schedule from the [schedule] section. Fixed kind: block
    radius (default 0), p (default 0.5), coupling (default optimal_on_U).
    Growing kind: delegates to the growing-plan builder."""
    sp = dict(cfg.schedule_params)
    if cfg.schedule_kind == "fixed":
        radius = int(sp.pop("block_radius", 0))
        p = float(sp.pop("p", 0.5))
        kind = sp.pop("coupling", "optimal_on_U")
        u_radius = sp.pop("u_radius", None)
        if u_radius is not None:
            sp["U"] = ball(float(u_radius), cfg.dimension)
        return schedules.fixed_schedule(cfg.spec, ball(radius, cfg.dimension),
                                        kind, sp, p=p)
    plan = schedules.growing_schedule(
        cfg.spec,
        delta=Fraction(sp.get("delta", Fraction(1, 4))),
        eps=float(sp.get("eps", 0.1)),
        n_max=int(sp.get("n_max", 4)),
        gamma_budget=int(sp.get("gamma_budget", 200)),
        ell1=int(sp.get("ell1", 1)),
        field=rnd.RandomField(cfg.seed))
    return schedules.plan_schedule(cfg.spec, plan)


def _is_single_site_binary(cfg: ExperimentConfig, sched) -> bool:
    return (cfg.spec.q == 2 and cfg.dimension == 2
            and cfg.schedule_kind == "fixed"
            and len(sched.block_at(1)) == 1)


def _map_replicas(fn, n: int, workers: int) -> list:
    """Evaluate fn(replica_id) for every id, optionally across processes;
    output order is canonical (by replica id) regardless of scheduling."""
    if workers <= 1:
        return [fn(i) for i in range(n)]
    with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, range(n), chunksize=max(1, n // workers)))


# ---- commands -------------------------------------------------------------

def cmd_conditions(cfg: ExperimentConfig) -> dict:
    """Spatial-mixing condition certification: the three desk checkers plus
    gamma presets and a weak-mixing profile preset (d = 2)."""
    spec = cfg.spec
    report = {"meta": cfg.meta(), "model": spec.name}
    g, thr, ok = exactgibbs.check_high_noise(spec)
    report["high_noise"] = {"gamma": g, "threshold": thr, "pass": bool(ok)}
    s, ok = exactgibbs.check_dobrushin(spec)
    report["dobrushin"] = {"influence_sum": s, "pass": bool(ok)}
    if cfg.p_c is None:
        report["disagreement_percolation"] = {
            "skipped": "supply tests.p_c (site-percolation threshold "
                       "for the relevant graph) to run this checker"}
    else:
        w, ok = exactgibbs.check_disagreement_percolation(spec, cfg.p_c)
        report["disagreement_percolation"] = {
            "worst_tv": w, "p_c": cfg.p_c, "pass": bool(ok)}
    origin = region([(0,) * spec.dimension])
    presets = {"site": {"gamma": g}}
    try:
        presets["block1_to_site"] = {
            "gamma": exactgibbs.gamma(spec, ball(1, spec.dimension), origin)}
    except exactgibbs.CapacityError as e:
        presets["block1_to_site"] = {
            "error": str(e),
            "suggestion": "reduce the block radius or alphabet size"}
    report["gamma_presets"] = presets
    if spec.dimension == 2:
        try:
            fam = exactgibbs.d2_weak_family(spec, cfg.mixing_sizes,
                                            spec.alphabet.symbols)
            mr = exactgibbs.mixing_profile(spec, "weak", fam)
            report["mixing_profile"] = json.loads(mr.to_json())
        except exactgibbs.CapacityError as e:
            report["mixing_profile"] = {
                "error": str(e),
                "suggestion": "use mixing_sizes=1 (radius-1 boxes)"}
    return report


def _torus_exact_law(spec: Spec, torus):
    empty = BoundaryCondition(region([], spec.dimension), ())
    return exactgibbs.conditional_dist(spec, torus.vertices(), empty,
                                       graph=torus)


def cmd_sample(cfg: ExperimentConfig) -> tuple:
    """Perfect samples plus (torus mode) goodness of fit against the
    exactly enumerated Gibbs law. Returns (report, per-draw records)."""
    spec = cfg.spec
    sched = build_schedule(cfg)
    field = rnd.RandomField(cfg.seed)
    report = {"meta": cfg.meta(), "model": spec.name,
              "substrate": cfg.substrate, "replicas": cfg.replicas}
    if cfg.substrate == "window":
        return _sample_window(cfg, sched, field, report)
    torus = Torus(cfg.torus_sides())
    sites = list(torus.vertices())
    if _is_single_site_binary(cfg, sched):
        draws = dyn.cftp_torus_batch(spec, torus, field, cfg.replicas,
                                     p=sched.p_at(1),
                                     horizon_cap=cfg.horizon_cap,
                                     censor=True)
    else:
        def one(i):
            f = field.split(i)
            try:
                return [dyn.cftp_value(spec, sched, f, v, cfg.horizon_cap,
                                       torus, cfg.exhaustion_limit).value
                        for v in sites]
            except dyn.CoalescenceTimeout:
                return [-1] * len(sites)
        draws = np.array(_map_replicas(one, cfg.replicas, cfg.workers),
                         dtype=np.int8)
    censored = draws[:, 0] < 0
    good = draws[~censored]
    records = [{"replica": int(i), "censored": bool(censored[i]),
                "config": None if censored[i] else draws[i].tolist()}
               for i in range(cfg.replicas)]
    report["censored"] = int(censored.sum())
    report["site_frequency"] = {
        str(a): float((good == a).mean()) for a in range(spec.q)}
    try:
        law = _torus_exact_law(spec, torus)
        index = {c: j for j, c in enumerate(law.support)}
        counts = np.zeros(len(law.support))
        for row in good:
            counts[index[tuple(int(x) for x in row)]] += 1
        probs = np.asarray(law.probs)
        report["tv_to_exact"] = tv_empirical(counts, probs)
        report["chi_square"] = chi_square_pooled(counts, probs,
                                                 cfg.min_expected)
        report["chi_square"]["pass"] = bool(
            report["chi_square"]["pvalue"] > cfg.significance)
        report["exact_states"] = len(law.support)
    except exactgibbs.CapacityError as e:
        report["exact_oracle"] = {"error": str(e),
                                  "suggestion": "use a smaller torus"}
    return report, records


def _sample_window(cfg, sched, field, report):
    """Z^d mode: per-replica perfect sample at the origin."""
    origin = (0,) * cfg.dimension

    def one(i):
        try:
            r = dyn.cftp_value(cfg.spec, sched, field.split(i), origin,
                               cfg.horizon_cap,
                               exhaustion_limit=cfg.exhaustion_limit)
            return r.value, r.T_v, r.radius_bound
        except dyn.CoalescenceTimeout:
            return -1, -1, -1
    rows = _map_replicas(one, cfg.replicas, cfg.workers)
    records = [{"replica": i, "censored": v < 0,
                "value": None if v < 0 else int(v),
                "T_v": None if v < 0 else int(t),
                "radius_bound": None if v < 0 else int(rb)}
               for i, (v, t, rb) in enumerate(rows)]
    vals = np.array([v for v, _, _ in rows])
    good = vals[vals >= 0]
    report["censored"] = int((vals < 0).sum())
    report["value_frequency"] = {
        str(a): float((good == a).mean()) for a in range(cfg.spec.q)}
    if len(good):
        ts = np.array([t for v, t, _ in rows if v >= 0])
        report["mean_T"] = float(ts.mean())
    return report, records


def cmd_tails(cfg: ExperimentConfig) -> tuple:
    """Coalescence-time survival curve with geometric fit.
    Returns (report, TailTable)."""
    spec = cfg.spec
    sched = build_schedule(cfg)
    field = rnd.RandomField(cfg.seed)
    if _is_single_site_binary(cfg, sched):
        times = dyn.coalescence_tail_batch(spec, field, cfg.replicas,
                                           p=sched.p_at(1),
                                           horizon_cap=cfg.horizon_cap)
    else:
        origin = (0,) * cfg.dimension

        def one(i):
            return dyn.forward_coalescence_sample(
                spec, sched, field.split(i), origin, cfg.horizon_cap,
                exhaustion_limit=cfg.exhaustion_limit)
        times = np.array(_map_replicas(one, cfg.replicas, cfg.workers))
    table = tail_table(times)
    report = {"meta": cfg.meta(), "model": spec.name,
              "replicas": cfg.replicas, **table.to_json()}
    if is_interaction_free(spec) and cfg.schedule_kind == "fixed":
        p = sched.p_at(1)
        n_excl = len(ball(sched.r_at(1), cfg.dimension))
        beta_u = p * (1 - p) ** (n_excl - 1)
        report["closed_form"] = {"beta_u": beta_u,
                                 "expected_slope": math.log(1 - beta_u)}
    return report, table


def cmd_coupling_diag(cfg: ExperimentConfig) -> tuple:
    """Coupling diagnostics on the configured block: gamma, coincidence,
    kappa, and a contraction sweep. Returns (report, JSON-lines text)."""
    spec = cfg.spec
    sp = dict(cfg.schedule_params)
    radius = int(sp.get("block_radius", 0))
    V = ball(radius, cfg.dimension)
    u_radius = sp.get("u_radius", None)
    U = V if u_radius is None else ball(float(u_radius), cfg.dimension)
    c = optimal_grand_coupling(spec, V, U)
    field = rnd.RandomField(cfg.seed)
    n_mc = max(512, (1 << 23) // max(len(c.keys), 1))
    vectorizable = (c.ucols == list(range(len(c.V))) and c.full_product)
    if c.exact_joint:
        co, se = coincidence_probability(c), 0.0
    elif vectorizable:
        # residual-branch agreement, all keys at once
        X = c.residual_configs_mc(n_mc, field)
        ucols_idx = [c.V.index(v) for v in U.vertices]
        nv = len(c.V)
        agree = np.ones(n_mc, dtype=bool)
        for j in ucols_idx:
            sym = (X // c.nq ** (nv - 1 - j)) % c.nq
            agree &= sym.min(axis=0) == sym.max(axis=0)
        co = c.gamma + (1 - c.gamma) * float(agree.mean())
        se = (1 - c.gamma) / math.sqrt(n_mc)
    else:
        co = coincidence_probability(c, n_draws=n_mc, field=field)
        se = c.last_stderr
    report = {"meta": cfg.meta(), "model": spec.name,
              "block_radius": radius, "boundary_size": len(c.keys[0].region),
              "n_boundary_conditions": len(c.keys),
              "gamma": c.gamma, "coincidence": co,
              "coincidence_stderr": se,
              "coincidence_gap": abs(co - c.gamma),
              "exact_joint": bool(c.exact_joint)}
    report["kappa"] = kappa(c, n_draws=n_mc, field=field)
    nb = len(c.keys[0].region)
    if c.exact_joint and len(c.keys) <= cfg.exhaustion_limit:
        passed, worst = check_contraction(c)
        report["contraction"] = {"mode": "exhaustive", "pass": bool(passed),
                                 "worst_slack": worst}
    else:
        rng = np.random.default_rng(cfg.seed)
        A_sets = [region([c.keys[0].region.vertices[j]
                          for j in rng.choice(nb, size=k, replace=False)],
                         cfg.dimension)
                  for k in range(1, min(3, nb) + 1) for _ in range(8)]
        passed, worst = check_contraction(c, A_sets=A_sets, n_draws=n_mc,
                                          field=field)
        report["contraction"] = {"mode": "monte_carlo", "pass": bool(passed),
                                 "worst_slack": worst,
                                 "a_sets": len(A_sets)}
    return report, diagnostics_json(c)


def cmd_schedule_build(cfg: ExperimentConfig) -> tuple:
    """Growing-plan construction report; returns (report, plan INI text)."""
    sp = dict(cfg.schedule_params)
    plan = schedules.growing_schedule(
        cfg.spec,
        delta=Fraction(sp.get("delta", Fraction(1, 4))),
        eps=float(sp.get("eps", 0.1)),
        n_max=int(sp.get("n_max", 4)),
        gamma_budget=int(sp.get("gamma_budget", 200)),
        ell1=int(sp.get("ell1", 1)),
        field=rnd.RandomField(cfg.seed))
    stages = []
    for n in range(1, len(plan.ells) + 1):
        stages.append({
            "n": n, "ell": plan.ells[n - 1], "p": plan.p_at(n),
            "certified": plan.certified[n - 1],
            "gamma_lcb": plan.gamma_lcb[n - 1],
            "gamma_method": plan.gamma_method[n - 1],
            "separation_ok": n == 1 or plan.separation_ok(n - 1),
            "log_success_bound": schedules.stage_success_bound_log(plan, n),
        })
    report = {"meta": cfg.meta(), "model": cfg.spec.name,
              "delta": str(plan.delta), "eps": plan.eps,
              "stages": stages,
              "exp_growth_constant": plan.exp_growth_constant(),
              "truncated_reason": plan.truncated_reason}
    return report, plan.to_config()


# ---- serialization --------------------------------------------------------

def write_jsonl(path: str, records) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def write_report(path: str, report: dict) -> None:
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
