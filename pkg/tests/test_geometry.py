import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mskernel.geometry import (Box, HierarchyParams, LevelHierarchy, LevelSet, SpatialIndex,
                               build_grid_hierarchy, fill_distance, generate_grid_level,
                               hierarchy_from_points, read_points_binary, read_points_csv,
                               separation_distance, validate_hierarchy, write_points_binary,
                               write_points_csv)


def test_grid_level_one():
    lv = generate_grid_level(1, Box.unit(2))
    assert lv.n == 9
    assert lv.q == 0.25
    assert abs(lv.h - 0.354) < 5e-4
    assert lv.delta == 4.0 * lv.h


def test_grid_level_four():
    lv = generate_grid_level(4, Box.unit(2))
    assert lv.n == 289
    assert round(lv.q, 4) == 0.0312 or round(lv.q, 4) == 0.0313
    assert abs(lv.h - 0.0442) < 5e-5


def test_grid_one_dimensional():
    lv = generate_grid_level(1, Box.unit(1))
    np.testing.assert_array_equal(lv.points[:, 0], [0.0, 0.5, 1.0])
    assert lv.q == 0.25 and lv.h == 0.25


def test_grid_rejects_level_zero():
    with pytest.raises(ValueError):
        generate_grid_level(0)


@pytest.mark.parametrize("ell", range(1, 12))
def test_grid_counts(ell):
    # only the count for the big levels; building 4M points is still cheap
    lv = generate_grid_level(ell, Box.unit(2))
    assert lv.n == (2**ell + 1) ** 2


@pytest.mark.parametrize("ell", range(1, 7))
def test_grid_closed_forms_match_measurements(ell):
    lv = generate_grid_level(ell, Box.unit(2))
    assert math.isclose(separation_distance(lv.points), lv.q, rel_tol=1e-12)
    assert math.isclose(fill_distance(lv.points, Box.unit(2)), lv.h, rel_tol=1e-12)
    assert math.isclose(lv.q, 2.0 ** -(ell + 1), rel_tol=0)
    assert math.isclose(lv.h, math.sqrt(2) * 2.0 ** -(ell + 1), rel_tol=1e-15)


def test_grid_order_is_row_major():
    lv = generate_grid_level(1)
    np.testing.assert_array_equal(lv.points[:3], [[0, 0], [0, 0.5], [0, 1]])


def test_points_are_read_only():
    lv = generate_grid_level(2)
    with pytest.raises(ValueError):
        lv.points[0, 0] = 1.0


def test_separation_examples():
    assert separation_distance(generate_grid_level(1).points) == 0.25
    assert separation_distance(np.array([[0.0, 0.0], [1.0, 0.0]])) == 0.5
    assert separation_distance(generate_grid_level(2).points) == 0.125
    with pytest.raises(ValueError):
        separation_distance(np.array([[0.0, 0.0]]))


def test_fill_distance_examples():
    assert math.isclose(fill_distance(generate_grid_level(1).points, Box.unit(2)), math.sqrt(2) / 4)
    assert fill_distance(np.array([[0.5]]), Box.unit(1)) == 0.5
    assert abs(fill_distance(generate_grid_level(4).points, Box.unit(2)) - 0.0442) < 5e-5
    with pytest.raises(ValueError):
        fill_distance(np.zeros((0, 2)), Box.unit(2))


def test_fill_distance_scattered_is_lower_estimate():
    rng = np.random.default_rng(3)
    pts = rng.random((40, 2))
    coarse = fill_distance(pts, Box.unit(2), resolution=64)
    fine = fill_distance(pts, Box.unit(2), resolution=256)
    assert 0 < coarse <= fine + 1e-12
    # a brute-force reference on a finer probe grid never falls below the estimate by much
    g = np.linspace(0, 1, 401)
    probe = np.stack(np.meshgrid(g, g, indexing="ij"), -1).reshape(-1, 2)
    ref = np.min(np.linalg.norm(probe[:, None] - pts[None], axis=-1), axis=1).max()
    assert fine <= ref + 1e-12
    assert fine > 0.97 * ref


def test_fill_distance_single_corner_point_square():
    assert math.isclose(fill_distance(np.array([[0.0, 0.0]]), Box.unit(2)), math.sqrt(2))


def test_validate_grid_hierarchy_passes():
    rep = validate_hierarchy(build_grid_hierarchy(4))
    assert rep.passed, rep.violations
    assert rep.h_ratios == [0.5, 0.5, 0.5]
    assert math.isclose(rep.c_q_observed, math.sqrt(2))
    assert rep.c_h_observed == 1.0
    assert math.isclose(rep.c_sharp_observed, 289 / 256)  # (2^l+1)^2 4^-l decreases in l


def test_validate_flags_small_mu():
    params = HierarchyParams(mu=0.9)
    hier = build_grid_hierarchy(2, params)
    rep = validate_hierarchy(hier)
    assert any("mu^(-d) > 2" in v for v in rep.violations)


def test_validate_single_level():
    rep = validate_hierarchy(build_grid_hierarchy(1))
    assert rep.h_ratios == []
    assert rep.c_h_observed is None


def test_validate_flags_nu_interval():
    params = HierarchyParams(nu=2.0, gamma=2.0)  # 1/h_1 = 2.83 > 2
    rep = validate_hierarchy(build_grid_hierarchy(2, params))
    assert any("nu" in v for v in rep.violations)


def test_params_invariants():
    for bad in (dict(mu=1.0), dict(mu=0.0), dict(nu=0.0), dict(c_h=0.0), dict(c_h=1.5),
                dict(c_q=0.5), dict(tau=1.0), dict(d=0)):
        with pytest.raises(ValueError):
            HierarchyParams(**bad)
    assert HierarchyParams().gamma == 2.0


def test_hierarchy_requires_increasing_counts():
    a = generate_grid_level(2)
    b = LevelSet(2, a.points[:5], a.h, a.q, a.delta)
    with pytest.raises(ValueError):
        LevelHierarchy(HierarchyParams(), Box.unit(2), [a, LevelSet(2, a.points, a.h, a.q, a.delta)])
    with pytest.raises(ValueError):
        LevelHierarchy(HierarchyParams(), Box.unit(2), [LevelSet(1, a.points, a.h, a.q, a.delta), b])


def test_hierarchy_rejects_points_outside_domain():
    lv = LevelSet(1, np.array([[0.0, 0.0], [2.0, 0.0]]), 1.0, 1.0, 4.0)
    with pytest.raises(ValueError):
        LevelHierarchy(HierarchyParams(), Box.unit(2), [lv])


def test_hierarchy_from_scattered_points():
    rng = np.random.default_rng(0)
    sets = [rng.random((n, 2)) for n in (10, 40)]
    hier = hierarchy_from_points(sets, HierarchyParams(), Box.unit(2), resolution=64)
    assert hier.sizes == [10, 40]
    assert all(lv.q <= lv.h for lv in hier.levels)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 500), seed=st.integers(0, 2**31 - 1), r=st.floats(0.0, 0.6))
def test_range_query_matches_brute_force(n, seed, r):
    rng = np.random.default_rng(seed)
    pts = rng.random((n, 2))
    x = rng.random(2)
    idx = SpatialIndex(pts, leafsize=8)
    brute = np.flatnonzero(np.linalg.norm(pts - x, axis=1) < r)
    np.testing.assert_array_equal(idx.range_query(x, r), brute)


def test_range_query_is_strict_at_boundary():
    pts = np.array([[0.0, 0.0], [0.5, 0.0], [1.0, 0.0]])
    idx = SpatialIndex(pts)
    np.testing.assert_array_equal(idx.range_query([0.0, 0.0], 0.5), [0])
    rows, cols, _ = idx.range_pairs(pts, 0.5)
    assert list(zip(rows, cols)) == [(0, 0), (1, 1), (2, 2)]


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), r=st.floats(0.01, 0.5))
def test_range_pairs_match_brute_force(seed, r):
    rng = np.random.default_rng(seed)
    P = rng.random((60, 2))
    Q = rng.random((30, 2))
    rows, cols, dist = SpatialIndex(P).range_pairs(Q, r)
    D = np.linalg.norm(Q[:, None] - P[None], axis=-1)
    bi, bj = np.nonzero(D < r)
    np.testing.assert_array_equal(rows, bi)
    np.testing.assert_array_equal(cols, bj)
    np.testing.assert_allclose(dist, D[bi, bj], rtol=0, atol=1e-15)


def test_csv_round_trip(tmp_path):
    pts = generate_grid_level(3).points
    path = tmp_path / "p.csv"
    write_points_csv(path, pts)
    text = path.read_text()
    lines = text.splitlines()
    assert text.endswith("\n") and lines[0] == "x0,x1" and lines[2] == "0.0,0.125"
    np.testing.assert_array_equal(read_points_csv(path), pts)


def test_binary_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    pts = rng.random((17, 3))
    path = tmp_path / "p.mskp"
    write_points_binary(path, pts)
    raw = path.read_bytes()
    assert raw[:4] == b"MSKP"
    assert len(raw) == 4 + 4 + 4 + 8 + 17 * 3 * 8
    np.testing.assert_array_equal(read_points_binary(path), pts)


def test_binary_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.mskp"
    path.write_bytes(b"NOPE" + bytes(16))
    with pytest.raises(ValueError):
        read_points_binary(path)


def test_truncate_hierarchy():
    hier = build_grid_hierarchy(4)
    assert hier.truncate(2).sizes == [9, 25]
    assert list(hier.offsets) == [0, 9, 34, 115, 404]
