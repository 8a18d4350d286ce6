import itertools
import math

import numpy as np
import pytest

from gibbscftp import randomness as rnd
from gibbscftp._coldp import BoxDP
from gibbscftp.coupling import (DisagreementSet, Psi, RandomDraw,
                                check_contraction, coincidence_probability,
                                contracting_coupling_2d, coupling_from_pmfs,
                                diagnostics_json, kappa, lambda_psi,
                                lambda_tau_A, optimal_grand_coupling,
                                pairwise_ratio_coupling, psi_one, tau_hash)
from gibbscftp.exactgibbs import Pmf, conditional_dist, gamma, tv_distance
from gibbscftp.lattice import ball, boundary, region
from gibbscftp.model import BoundaryCondition, make_model


def leave_one_out_family(k):
    V = region([(0,)])
    return [Pmf(V, tuple((j,) for j in range(k) if j != i),
                (1.0 / (k - 1),) * (k - 1)) for i in range(k)]


def site_coupling(name, params, U_eq_V=True):
    spec = make_model(name, params, 2)
    V = region([(0, 0)])
    return spec, optimal_grand_coupling(spec, V, V)


def test_free_spec_full_coincidence():
    _, c = site_coupling("potts", {"q": 3, "beta": 0.0})
    assert abs(c.gamma - 1.0) < 1e-15
    assert coincidence_probability(c) == 1.0


def test_leave_one_out_zero_coincidence():
    c = coupling_from_pmfs(leave_one_out_family(3))
    assert c.gamma == 0.0
    assert coincidence_probability(c) == 0.0


def test_two_bernoullis_coincidence():
    V = region([(0,)])
    p = Pmf(V, ((0,), (1,)), (0.7, 0.3))
    q = Pmf(V, ((0,), (1,)), (0.5, 0.5))
    c = coupling_from_pmfs([p, q])
    assert abs(coincidence_probability(c) - 0.8) < 1e-12


def test_single_member_family():
    _, c = site_coupling("potts", {"q": 2, "beta": 0.4})
    assert coincidence_probability(c, family=[c.keys[0]]) == 1.0
    with pytest.raises(ValueError):
        coincidence_probability(c, family=[])


def test_full_family_coincidence_equals_gamma():
    for name, params in (("hardcore", {"lambda": 0.5}),
                         ("potts", {"q": 2, "beta": 0.3}),
                         ("potts", {"q": 3, "beta": 0.15})):
        spec, c = site_coupling(name, params)
        V = region([(0, 0)])
        g = gamma(spec, V, V)
        assert abs(c.gamma - g) < 1e-12
        assert abs(coincidence_probability(c) - g) < 1e-12


def test_leave_one_out_k4_pairwise_disagreement():
    fam = leave_one_out_family(4)
    c = coupling_from_pmfs(fam)
    worst = 0.0
    for i in range(4):
        for j in range(i + 1, 4):
            co = coincidence_probability(c, family=[i, j])
            worst = max(worst, 1.0 - co)
    assert worst >= 0.5


def test_kappa_examples():
    _, cfree = site_coupling("potts", {"q": 4, "beta": 0.0})
    assert abs(kappa(cfree) - 1.0) < 1e-15
    spec, c = site_coupling("potts", {"q": 2, "beta": 0.3})
    k = kappa(c)
    assert c.gamma - 1e-12 <= k <= 1.0
    # on a single site kappa is exactly the full coincidence probability
    assert abs(k - coincidence_probability(c)) < 1e-12


def test_lambda_tau_A_identities():
    spec, c = site_coupling("potts", {"q": 2, "beta": 0.3})
    tau = c.keys[0]
    B = tau.region
    assert lambda_tau_A(c, tau, region([], 2)) == 0.0
    k = kappa(c)
    for tau in c.keys:
        lam_full = lambda_tau_A(c, tau, B)
        assert abs(lam_full - (1.0 - k)) < 1e-12


def test_lambda_tau_A_monotone_in_A():
    spec, c = site_coupling("potts", {"q": 2, "beta": 0.25})
    tau = c.keys[0]
    B = tau.region
    verts = list(B.vertices)
    prev = 0.0
    for size in range(1, len(verts) + 1):
        lam = lambda_tau_A(c, tau, region(verts[:size], 2))
        assert lam >= prev - 1e-12
        prev = lam


def test_lambda_psi_identities():
    spec, c = site_coupling("potts", {"q": 2, "beta": 0.3})
    B = c.keys[0].region
    tau = c.keys[0]
    # eta pinning every boundary site leaves one key: no uncertainty
    eta_pin = {v: {tau.values[i]} for i, v in enumerate(B.vertices)}
    assert lambda_psi(c, psi_one, eta_pin) == 0.0
    # psi_one with a two-symbol window at A reproduces lambda(tau, A)
    A = region([B.vertices[0]], 2)
    eta = dict(eta_pin)
    eta[B.vertices[0]] = {0, 1}
    assert abs(lambda_psi(c, psi_one, eta) - lambda_tau_A(c, tau, A)) < 1e-12
    with pytest.raises(ValueError):
        lambda_psi(c, psi_one, {B.vertices[0]: set()})
    # free spec: zero everywhere
    _, cf = site_coupling("potts", {"q": 2, "beta": 0.0})
    etaf = {v: {0, 1} for v in cf.keys[0].region.vertices}
    assert lambda_psi(cf, psi_one, etaf) == 0.0


def test_psi_validation():
    with pytest.raises(ValueError):
        Psi(lambda s: 1.0)({0})  # nonzero on a singleton
    with pytest.raises(ValueError):
        Psi(lambda s: -1.0)({0, 1})
    with pytest.raises(ValueError):
        psi_one(set())
    assert psi_one({3}) == 0.0 and psi_one({1, 2}) == 1.0


def test_check_contraction_free_spec():
    _, c = site_coupling("potts", {"q": 2, "beta": 0.0})
    ok, worst = check_contraction(c)
    assert ok
    nb = len(c.keys[0].region)
    # lambda is identically 0, so the worst slack is the smallest bound
    assert abs(worst - 1.0 / nb) < 1e-12
    assert c.last_records and all(r["lambda"] == 0.0 for r in c.last_records)
    text = diagnostics_json(c)
    assert text.count("\n") == len(c.last_records) - 1


def test_check_contraction_modes_and_errors():
    spec, c = site_coupling("potts", {"q": 2, "beta": 0.1})
    ok, worst = check_contraction(c)
    assert ok and worst > 0
    B = c.keys[0].region
    tau = c.keys[0]
    eta = {v: {tau.values[i]} for i, v in enumerate(B.vertices)}
    eta[B.vertices[0]] = {0, 1}
    okp, worstp = check_contraction(c, mode="psi", etas=[eta])
    assert okp
    with pytest.raises(ValueError):
        check_contraction(c, mode="bogus")
    with pytest.raises(ValueError):
        check_contraction(c, mode="psi")


def test_evaluate_deterministic_and_exact_marginals():
    spec, c = site_coupling("hardcore", {"lambda": 0.8})
    f = rnd.RandomField(17)
    for i in range(5):
        d = RandomDraw(f, (i,))
        assert c.evaluate(c.keys[0], d) == c.evaluate(c.keys[0], d)
    # per-key marginals from the exact joint match the conditionals
    V = region([(0, 0)])
    atoms = c.exact_atoms()
    for ki, tau in enumerate(c.keys):
        law = {}
        for p, profile in atoms:
            cfg = c.support[profile[ki]]
            law[cfg] = law.get(cfg, 0.0) + p
        want = conditional_dist(spec, V, tau).as_dict()
        for cfg, pr in want.items():
            assert abs(law.get(cfg, 0.0) - pr) < 1e-12


def test_evaluate_mc_marginal_goodness_of_fit():
    from scipy import stats
    spec = make_model("potts", {"q": 2, "beta": 0.2}, 2)
    V = region([(0, 0), (1, 0)])
    c = optimal_grand_coupling(spec, V, V)
    tau = c.keys[3]
    want = conditional_dist(spec, V, tau).as_dict()
    f = rnd.RandomField(99)
    n = 100000
    counts = {}
    for i in range(n):
        cfg = c.evaluate(tau, RandomDraw(f, (i,)))
        counts[cfg] = counts.get(cfg, 0) + 1
    sup = sorted(want)
    obs = np.array([counts.get(k, 0) for k in sup], dtype=float)
    exp = np.array([want[k] * n for k in sup])
    stat = ((obs - exp) ** 2 / exp).sum()
    p = stats.chi2.sf(stat, len(sup) - 1)
    assert p > 1e-3


def test_residual_branch_vectorized_matches_evaluate():
    spec, c = site_coupling("potts", {"q": 2, "beta": 0.3})
    f = rnd.RandomField(5)
    n = 64
    X = c.residual_configs_mc(n, f)
    for i in range(n):
        if f.uniform((i, rnd.TAG_SELECT)) >= c.gamma:
            d = RandomDraw(f, (i,))
            for ki, k in enumerate(c.keys):
                assert c.evaluate(k, d) == c.support[X[ki, i]]


def test_disagreement_set_validation():
    B = boundary(region([(0, 0)]))
    A = DisagreementSet(region([B.vertices[0]], 2), B)
    assert len(A) == 1 and list(A) == [B.vertices[0]]
    with pytest.raises(ValueError):
        DisagreementSet(region([(9, 9)]), B)


def test_tau_hash_stable():
    spec, c = site_coupling("potts", {"q": 2, "beta": 0.1})
    h = tau_hash(c.keys[0])
    assert h == tau_hash(c.keys[0]) and len(h) == 16
    assert h != tau_hash(c.keys[1])


def test_pairwise_coupling_identical_taus():
    spec = make_model("potts", {"q": 2, "beta": 0.1}, 2)
    V = ball(2, 2)
    U = ball(0, 2)
    B = boundary(V)
    tau = BoundaryCondition.constant(spec, B, 1)
    pc = pairwise_ratio_coupling(spec, V, U, tau, tau)
    om, sg = pc.sample_batch(rnd.RandomField(3), 200)
    assert np.array_equal(om, sg)
    assert pc.exact_u_tv() < 1e-12


def test_pairwise_coupling_free_spec_agrees_on_u():
    spec = make_model("potts", {"q": 2, "beta": 0.0}, 2)
    V = ball(2, 2)
    U = ball(0, 2)
    B = boundary(V)
    tau = BoundaryCondition.constant(spec, B, 1)
    tau2 = BoundaryCondition.constant(spec, B, 2)
    pc = pairwise_ratio_coupling(spec, V, U, tau, tau2)
    om, sg = pc.sample_batch(rnd.RandomField(4), 500)
    ucols = [V.index(u) for u in U.vertices]
    assert np.array_equal(om[:, ucols], sg[:, ucols])


def test_pairwise_coupling_containment_and_tv():
    spec = make_model("potts", {"q": 2, "beta": 0.15}, 2)
    V = ball(2, 2)
    U = ball(0, 2)
    B = boundary(V)
    tau = BoundaryCondition.constant(spec, B, 1)
    tau2 = BoundaryCondition.constant(spec, B, 2)
    pc = pairwise_ratio_coupling(spec, V, U, tau, tau2)
    n = 4000
    om, sg = pc.sample_batch(rnd.RandomField(11), n)
    bcols = [V.index(v) for v in pc.B.vertices]
    ucols = [V.index(u) for u in U.vertices]
    agree_b = (om[:, bcols] == sg[:, bcols]).all(axis=1)
    agree_u = (om[:, ucols] == sg[:, ucols]).all(axis=1)
    # pathwise: agreement on the separating shell forces agreement inside
    assert not np.any(agree_b & ~agree_u)
    # disagreement frequency on U dominates the exact TV on U
    tv = pc.exact_u_tv()
    p_hat = float((~agree_u).mean())
    sigma = math.sqrt(max(p_hat * (1 - p_hat), 1e-9) / n)
    assert p_hat >= tv - 3 * sigma


def test_pairwise_coupling_marginals_exact():
    spec = make_model("potts", {"q": 2, "beta": 0.15}, 2)
    V = ball(2, 2)
    U = ball(0, 2)
    B = boundary(V)
    tau = BoundaryCondition.constant(spec, B, 1)
    tau2 = BoundaryCondition.constant(spec, B, 2)
    pc = pairwise_ratio_coupling(spec, V, U, tau, tau2)
    n = 4000
    om, sg = pc.sample_batch(rnd.RandomField(21), n)
    u0 = V.index((0, 0))
    for vals, dp in ((om, pc.dp1), (sg, pc.dp2)):
        want = dp.marginal_table([(0, 0)])[1]
        got = float((vals[:, u0] == 1).mean())
        sigma = math.sqrt(want * (1 - want) / n)
        assert abs(got - want) <= 4 * sigma


def test_contracting_coupling_parameter_validation():
    spec = make_model("potts", {"q": 2, "beta": 0.1}, 2)
    for n, r, s in ((4, 2, 2), (4, 0, 1), (3, 1, 2), (4, 1, 5)):
        with pytest.raises(ValueError):
            contracting_coupling_2d(spec, n, r, s)
    cc = contracting_coupling_2d(spec, 4, 1, 2)
    assert len(cc.V) == 81 and len(cc.U) == 49


def test_contracting_coupling_free_spec_full_coincidence():
    spec = make_model("potts", {"q": 2, "beta": 0.0}, 2)
    cc = contracting_coupling_2d(spec, 4, 1, 2)
    B = boundary(cc.V)
    tau1 = BoundaryCondition.constant(spec, B, 1)
    tau2 = BoundaryCondition.constant(spec, B, 2)
    f = rnd.RandomField(8)
    for i in range(3):
        d = RandomDraw(f, (i,))
        assert cc.evaluate(tau1, d) == cc.evaluate(tau2, d)


def test_contracting_coupling_deterministic_and_exact_marginal():
    spec = make_model("potts", {"q": 2, "beta": 0.15}, 2)
    cc = contracting_coupling_2d(spec, 4, 1, 2)
    B = boundary(cc.V)
    tau = BoundaryCondition.constant(spec, B, 1)
    f = rnd.RandomField(13)
    d0 = RandomDraw(f, (0,))
    assert cc.evaluate(tau, d0) == cc.evaluate(tau, d0)
    n = 400
    i0 = cc.V.index((0, 0))
    hits = sum(cc.evaluate(tau, RandomDraw(f, (i,)))[i0] == 1 for i in range(n))
    dp = BoxDP(spec, -4, 4, -4, 4, tau)
    want = dp.marginal_table([(0, 0)])[1]
    sigma = math.sqrt(want * (1 - want) / n)
    assert abs(hits / n - want) <= 4 * sigma
