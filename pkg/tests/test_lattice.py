import itertools

import pytest
from hypothesis import given, strategies as st

from gibbscftp.lattice import (LatticeGraph, Region, Torus, ball, boundary,
                               dist, l1, region, region_from_text,
                               region_to_text, sphere_count, unit_steps)


def test_ball_sizes():
    assert ball(0, 2).vertices == ((0, 0),)
    assert len(ball(1, 2)) == 9
    assert len(ball(2, 3)) == 125
    for d in (1, 2, 3):
        for r in range(7):
            assert len(ball(r, d)) == (2 * r + 1) ** d


def test_ball_fractional_radius_floors():
    assert ball(1.5, 2).vertices == ball(1, 2).vertices
    assert ball(0.9, 2).vertices == ball(0, 2).vertices


def test_boundary_examples():
    assert len(boundary(region([(0, 0)]))) == 4
    assert len(boundary(ball(1, 2))) == 12
    assert len(boundary(region([(0, 0, 0)]))) == 6


def test_boundary_disjoint_and_distance_one():
    for V in (ball(1, 2), ball(2, 2), region([(0, 0), (2, 0)])):
        B = boundary(V)
        assert not set(B.vertices) & set(V.vertices)
        assert dist(V, B) == 1
        for u in B:
            assert min(l1(u, v) for v in V) == 1


def test_dist_examples():
    assert dist(region([(0, 0)]), region([(3, 4)])) == 7
    assert dist(ball(1, 2), boundary(ball(1, 2))) == 1
    assert dist(ball(1, 2), boundary(ball(3, 2))) == 3


def test_dist_symmetry_and_zero_iff_overlap():
    A = ball(1, 2)
    B = region([(1, 1), (4, 4)])
    assert dist(A, B) == dist(B, A) == 0
    C = region([(5, 5)])
    assert dist(A, C) == dist(C, A) == 8
    assert dist(A, C) > 0


def test_dist_rejects_empty():
    with pytest.raises(ValueError):
        dist(region([], 2), ball(1, 2))


def test_sphere_count_examples_and_brute_force():
    assert sphere_count(1, 2) == 4
    assert sphere_count(2, 2) == 8
    for d in (1, 2, 3):
        assert sphere_count(0, d) == 1
        for r in range(1, 7):
            brute = sum(1 for v in ball(r, d)
                        if sum(abs(c) for c in v) == r)
            assert sphere_count(r, d) == brute


def test_translation_equivariance_of_boundary():
    V = region([(0, 0), (1, 0), (0, 1)])
    u = (3, -2)
    assert boundary(V.translate(u)).vertices == \
        boundary(V).translate(u).vertices


@given(st.lists(st.tuples(st.integers(-5, 5), st.integers(-5, 5)),
                min_size=1, max_size=8),
       st.tuples(st.integers(-4, 4), st.integers(-4, 4)))
def test_boundary_translation_property(verts, u):
    V = region(verts)
    assert boundary(V.translate(u)).vertices == \
        boundary(V).translate(u).vertices


def test_region_order_deterministic_and_deduplicated():
    V = region([(1, 0), (0, 0), (1, 0), (0, 1)])
    assert V.vertices == ((0, 0), (0, 1), (1, 0))
    assert list(V) == sorted(set(V.vertices))
    assert V.index((0, 1)) == 1


def test_region_diameter():
    assert ball(1, 2).diameter() == 4
    assert ball(2, 2).diameter() == 8
    assert region([(0, 0)]).diameter() == 0


def test_region_text_round_trip():
    V = ball(1, 2)
    assert region_from_text(region_to_text(V)).vertices == V.vertices
    W = region([(-3, 7), (2, 2)])
    assert region_from_text(region_to_text(W)).vertices == W.vertices


def test_unit_steps():
    assert set(unit_steps(2)) == {(1, 0), (-1, 0), (0, 1), (0, -1)}
    assert len(unit_steps(3)) == 6


def test_torus_wrap_and_neighbors():
    t = Torus((3, 4))
    assert t.wrap((3, 4)) == (0, 0)
    assert t.wrap((-1, -1)) == (2, 3)
    nb = set(map(tuple, t.neighbors((0, 0))))
    assert nb == {(1, 0), (2, 0), (0, 1), (0, 3)}
    assert len(t.vertices()) == 12


def test_torus_distance_wraps():
    t = Torus((4, 4))
    assert t.dist((0, 0), (3, 0)) == 1
    assert t.dist((0, 0), (2, 2)) == 4


def test_torus_rejects_small_sides():
    with pytest.raises(ValueError):
        Torus((2, 4))


def test_torus_edges_each_once():
    t = Torus((3, 3))
    es = t.edges()
    assert len(es) == 2 * 9  # 2 edges per vertex on a 2-d torus
    assert len(set(es)) == len(es)


def test_lattice_graph_identity_wrap():
    g = LatticeGraph(2)
    assert g.wrap((5, -3)) == (5, -3)
    assert set(map(tuple, g.neighbors((1, 1)))) == \
        {(2, 1), (0, 1), (1, 2), (1, 0)}
    assert g.dist((0, 0), (3, 4)) == 7
