import json
import math
from fractions import Fraction

import numpy as np
import pytest

from gibbscftp import cli
from gibbscftp.experiments import (ExperimentConfig, TailTable, _parse_scalar,
                                   _wilson_interval, build_schedule,
                                   chi_square_pooled, cmd_conditions,
                                   cmd_coupling_diag, cmd_sample,
                                   cmd_schedule_build, cmd_tails, load_config,
                                   tail_table, tv_empirical)
from gibbscftp.lattice import ball
from gibbscftp.schedules import FreeBlockCoupling

HC_TORUS_INI = """
[model]
name = hardcore
d = 2
lambda = 0.5

[schedule]
kind = fixed
block_radius = 0
p = 0.5

[run]
seed = 3
replicas = 300
substrate = torus:3x3

[tests]
p_c = 0.593
"""

FREE_INI = """
[model]
name = potts
d = 2
q = 2
beta = 0.0

[schedule]
kind = fixed
block_radius = 0

[run]
seed = 11
replicas = 3000
"""


def test_parse_scalar():
    assert _parse_scalar("3") == 3
    assert _parse_scalar("0.25") == 0.25
    assert _parse_scalar("1/4") == Fraction(1, 4)
    assert _parse_scalar("optimal_on_U") == "optimal_on_U"


def test_load_config_defaults_and_overrides():
    cfg = load_config(HC_TORUS_INI)
    assert cfg.model_name == "hardcore"
    assert cfg.model_params == {"lambda": 0.5}
    assert cfg.substrate == "torus:3x3" and cfg.torus_sides() == (3, 3)
    assert cfg.seed == 3 and cfg.replicas == 300
    assert cfg.p_c == 0.593
    assert cfg.significance == 1e-3 and cfg.min_expected == 5.0
    over = load_config(HC_TORUS_INI, {"seed": 99, "replicas": 7,
                                      "substrate": "window"})
    assert over.seed == 99 and over.replicas == 7
    assert over.substrate == "window"
    bare = load_config(None)
    assert bare.model_name == "potts" and bare.schedule_kind == "fixed"


def test_config_validation_errors():
    with pytest.raises(ValueError):
        load_config(HC_TORUS_INI, {"substrate": "torus:3x3x3"})
    with pytest.raises(ValueError):
        load_config(HC_TORUS_INI, {"substrate": "donut:3x3"})
    with pytest.raises(ValueError):
        load_config(HC_TORUS_INI, {"replicas": 0})
    with pytest.raises(ValueError):
        load_config(HC_TORUS_INI, {"seed": -1})
    with pytest.raises(ValueError):
        load_config("[schedule]\nkind = sideways\n")


def test_config_hash_deterministic_and_sensitive():
    a = load_config(HC_TORUS_INI)
    b = load_config(HC_TORUS_INI)
    assert a.hash() == b.hash() and len(a.hash()) == 16
    c = load_config(HC_TORUS_INI, {"seed": 4})
    assert c.hash() != a.hash()
    meta = a.meta()
    assert meta["config_hash"] == a.hash() and meta["seed"] == 3


def test_chi_square_pooled_behavior():
    # exact 2-cell case: stat and dof by hand
    counts = np.array([60.0, 40.0])
    probs = np.array([0.5, 0.5])
    r = chi_square_pooled(counts, probs)
    assert r["dof"] == 1 and abs(r["stat"] - (100 + 100) / 50.0) < 1e-12
    # tiny expected cells get pooled
    counts = np.array([91.0, 4.0, 3.0, 2.0])
    probs = np.array([0.90, 0.04, 0.03, 0.03])
    r = chi_square_pooled(counts, probs, min_expected=5.0)
    # expected 3 and 3 pool together; 4 merges into the 90 cell
    assert r["cells"] == 2
    # calibration: data drawn from the law is not rejected
    rng = np.random.default_rng(0)
    probs = np.array([0.4, 0.3, 0.2, 0.1])
    counts = rng.multinomial(20000, probs)
    assert chi_square_pooled(counts, probs)["pvalue"] > 1e-3
    # power: the wrong law is rejected decisively
    wrong = np.array([0.25, 0.25, 0.25, 0.25])
    assert chi_square_pooled(counts, wrong)["pvalue"] < 1e-10


def test_tv_empirical_and_wilson():
    counts = np.array([30.0, 70.0])
    probs = np.array([0.5, 0.5])
    assert abs(tv_empirical(counts, probs) - 0.2) < 1e-12
    lo, hi = _wilson_interval(50, 100)
    assert 0.0 <= lo < 0.5 < hi <= 1.0
    assert _wilson_interval(0, 0) == (0.0, 1.0)


def test_tail_table_geometric_fit_and_censoring():
    rng = np.random.default_rng(7)
    p = 0.05
    times = rng.geometric(p, size=20000).astype(np.int64)
    times[:100] = -1  # censored draws are excluded, not zero-filled
    t = tail_table(times)
    assert t.n_censored == 100 and t.n_observed == 19900
    surv = [r[1] for r in t.rows]
    assert all(a >= b for a, b in zip(surv, surv[1:]))
    assert t.rows[0][1] == 19900  # survivors at 0: all times are >= 1
    assert abs(t.slope - math.log(1 - p)) <= 4 * t.slope_sigma
    assert "survivors" in t.to_csv()
    assert t.to_json()["n_censored"] == 100
    with pytest.raises(ValueError):
        tail_table(np.array([-1, -1]))
    with pytest.raises(ValueError):
        TailTable(((0, 5, 1.0, 0.9, 1.0), (1, 6, 1.0, 0.9, 1.0)),
                  0.0, 0.0, 0.0, 6, 0)


def test_build_schedule_kinds():
    cfg = load_config(HC_TORUS_INI)
    sched = build_schedule(cfg)
    assert sched.p_at(1) == 0.5 and len(sched.block_at(1)) == 1
    gcfg = load_config("""
[model]
name = potts
d = 2
q = 2
beta = 0.0

[schedule]
kind = growing
ell1 = 2
n_max = 2
delta = 1/4
""")
    gsched = build_schedule(gcfg)
    assert gsched.p_at(1) == 0.25
    assert gsched.block_at(2).vertices == ball(65, 2).vertices
    assert isinstance(gsched.coupling_at(1), FreeBlockCoupling)


def test_cmd_conditions_hardcore():
    cfg = load_config(HC_TORUS_INI)
    rep = cmd_conditions(cfg)
    assert abs(rep["high_noise"]["gamma"] - 1.0 / 1.5) < 1e-12
    assert not rep["high_noise"]["pass"]  # 0.667 < 0.75
    assert abs(rep["dobrushin"]["influence_sum"] - 4 * 0.5 / 1.5) < 1e-12
    assert not rep["dobrushin"]["pass"]  # 1.333 > 1
    dp = rep["disagreement_percolation"]
    assert abs(dp["worst_tv"] - 0.5 / 1.5) < 1e-12 and dp["pass"]
    assert "gamma" in rep["gamma_presets"]["block1_to_site"]
    assert "distances" in rep["mixing_profile"]
    # without p_c the checker reports why it was skipped
    rep2 = cmd_conditions(load_config(HC_TORUS_INI.replace(
        "p_c = 0.593", "")))
    assert "skipped" in rep2["disagreement_percolation"]


def test_cmd_sample_torus_exact_and_reproducible():
    cfg = load_config(HC_TORUS_INI)
    rep1, recs1 = cmd_sample(cfg)
    rep2, recs2 = cmd_sample(load_config(HC_TORUS_INI))
    assert rep1 == rep2 and recs1 == recs2  # bit-identical rerun
    assert rep1["censored"] == 0
    assert rep1["chi_square"]["pass"]
    assert 0.0 < rep1["tv_to_exact"] < 0.5
    assert rep1["exact_states"] > 0
    assert len(recs1) == 300 and recs1[0]["config"] is not None
    # a different seed gives different draws
    rep3, recs3 = cmd_sample(load_config(HC_TORUS_INI, {"seed": 4}))
    assert recs3 != recs1


def test_cmd_sample_window():
    cfg = load_config(FREE_INI, {"replicas": 60, "substrate": "window"})
    rep, recs = cmd_sample(cfg)
    assert rep["censored"] == 0 and len(recs) == 60
    freq = rep["value_frequency"]
    assert abs(freq["0"] + freq["1"] - 1.0) < 1e-12
    assert rep["mean_T"] > 0
    assert recs[0]["T_v"] >= 1 and recs[0]["radius_bound"] >= 2


def test_cmd_tails_free_spec_closed_form():
    cfg = load_config(FREE_INI)
    rep, table = cmd_tails(cfg)
    cf = rep["closed_form"]
    beta_u = 0.5 * 0.5 ** 8
    assert abs(cf["beta_u"] - beta_u) < 1e-15
    assert abs(cf["expected_slope"] - math.log(1 - beta_u)) < 1e-15
    assert abs(table.slope - cf["expected_slope"]) <= 4 * table.slope_sigma
    assert table.n_censored == 0


def test_cmd_coupling_diag_exact_site():
    cfg = load_config("""
[model]
name = potts
d = 2
q = 2
beta = 0.1

[schedule]
kind = fixed
block_radius = 0

[run]
seed = 5
""")
    rep, lines = cmd_coupling_diag(cfg)
    assert rep["exact_joint"] and rep["n_boundary_conditions"] == 16
    assert rep["coincidence_stderr"] == 0.0
    assert rep["coincidence_gap"] < 1e-12  # exactly optimal
    assert rep["contraction"]["mode"] == "exhaustive"
    assert rep["contraction"]["pass"]
    assert rep["kappa"] >= rep["gamma"] - 1e-12
    assert all(json.loads(ln) for ln in lines.splitlines())


def test_cmd_schedule_build_free_spec():
    cfg = load_config("""
[model]
name = potts
d = 2
q = 2
beta = 0.0

[schedule]
kind = growing
ell1 = 2
n_max = 3
delta = 1/4

[run]
seed = 1
""")
    rep1, plan1 = cmd_schedule_build(cfg)
    rep2, plan2 = cmd_schedule_build(cfg)
    assert rep1 == rep2 and plan1 == plan2
    assert [s["ell"] for s in rep1["stages"]] == [2, 65, 2145]
    assert all(s["certified"] and s["separation_ok"] for s in rep1["stages"])
    assert all(s["log_success_bound"] < 0 for s in rep1["stages"])
    assert rep1["truncated_reason"] == ""


def test_cli_end_to_end(tmp_path, capsys):
    cfg_path = tmp_path / "cfg.ini"
    cfg_path.write_text(HC_TORUS_INI)
    prefix = tmp_path / "run1"
    rc = cli.main(["conditions", "--config", str(cfg_path),
                   "--out", str(prefix)])
    assert rc == 0
    stdout = capsys.readouterr().out
    report = json.loads(stdout)
    assert report["model"] == "hardcore"
    on_disk = json.loads((tmp_path / "run1.json").read_text())
    assert on_disk == report
    # sample writes per-draw records
    prefix2 = tmp_path / "run2"
    rc = cli.main(["sample", "--config", str(cfg_path), "--replicas", "50",
                   "--out", str(prefix2)])
    assert rc == 0
    capsys.readouterr()
    lines = (tmp_path / "run2.jsonl").read_text().splitlines()
    assert len(lines) == 50 and json.loads(lines[0])["replica"] == 0
    # tails writes the CSV table
    free_path = tmp_path / "free.ini"
    free_path.write_text(FREE_INI)
    prefix3 = tmp_path / "run3"
    rc = cli.main(["tails", "--config", str(free_path), "--replicas", "500",
                   "--out", str(prefix3)])
    assert rc == 0
    capsys.readouterr()
    assert (tmp_path / "run3.csv").read_text().startswith("n,survivors")


def test_cli_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[model]\nname = nope\n")
    rc = cli.main(["conditions", "--config", str(bad)])
    assert rc == 2
    assert "config error" in capsys.readouterr().err
    rc = cli.main(["conditions", "--config", str(tmp_path / "missing.ini")])
    assert rc == 2
