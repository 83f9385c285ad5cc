import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from conftest import full_coupling, grid_hierarchy, grid_system
from mskernel.analysis import (C_d, M_d, PowerIterationError, bound_constants, c_sigma, c_sigma_closed,
                               c_sigma_direct, compute_theta, condition_bound, condition_diagnostics,
                               decay_radius, decreasing_paths, eulerian_polynomial, fmt12,
                               lagrange_decay_probe, m_norm_bound, matrix_two_norm, observed_params,
                               path_sum_inverse, power_iteration, select_truncation_radius, theta_from_z,
                               truncation_sweep, verify_explicit_inverse, write_table)
from mskernel.assembly import dense_coupling
from mskernel.geometry import HierarchyParams

# frozen with 30-digit mpmath summation / gamma evaluation
M2 = 8.449228082045292
C2 = 4.461840948901423
CSIGMA = {(2, 0.5): 41.83268361813047, (2, 0.05): 17681.68295771745,
          (2, 1e-3): 2004004001.666992, (3, 0.2): 5593.133527283691}


@pytest.fixture(scope="module")
def observed():
    p = observed_params(grid_hierarchy(5))
    return p, bound_constants(p)


def test_dimension_constants():
    assert M_d(2) == pytest.approx(M2, rel=1e-14)
    assert C_d(2) == pytest.approx(C2, rel=1e-14)
    # d = 1: Gamma(3/2)^2 = pi/4
    assert M_d(1) == pytest.approx(12 * (math.pi**2 / 36) ** 0.5, rel=1e-14)


def test_theta_hand_value():
    for R in (1.0, 8.0, 3.5):
        assert theta_from_z(9.0, R) == pytest.approx(math.log(2) / (2 * R), rel=1e-14)


def test_theta_vanishes_for_large_z():
    vals = [theta_from_z(10.0**e, 8.0) for e in (2, 6, 12, 24)]
    assert all(a > b > 0 for a, b in zip(vals, vals[1:]))
    assert vals[-1] < 1e-12


@pytest.mark.parametrize("z", [1.0, 0.5, -3.0])
def test_theta_rejects_small_z(z):
    with pytest.raises(ValueError):
        theta_from_z(z, 1.0)


def test_observed_constants(observed):
    p, c = observed
    assert p.c_q == pytest.approx(math.sqrt(2), rel=1e-14)
    assert c.R == pytest.approx(8.0, rel=1e-14)
    z = 16 / C2 * (1 + 4 * M2**2 * 16 * 2) ** 3
    assert c.z == pytest.approx(z, rel=1e-12)
    # -log((s-1)/(s+1)) = 2 atanh(1/s)
    assert c.theta == pytest.approx(math.atanh(1 / math.sqrt(z)) / 8.0, rel=1e-12)
    assert c.theta > 0
    assert c.C_cg == pytest.approx((math.sqrt(z) - 1) / (math.sqrt(z) + 1), rel=1e-15)
    assert c.C_Sigma == pytest.approx(c_sigma_closed(2, c.theta), rel=1e-12)


@pytest.mark.parametrize("key", sorted(CSIGMA))
def test_c_sigma_against_frozen_sums(key):
    d, th = key
    assert c_sigma_closed(d, th) == pytest.approx(CSIGMA[key], rel=1e-10)
    if th >= 0.05:
        assert c_sigma_direct(d, th) == pytest.approx(CSIGMA[key], rel=1e-12)


@settings(max_examples=25, deadline=None)
@given(d=st.integers(1, 4), th=st.floats(0.02, 3.0))
def test_c_sigma_closed_equals_direct(d, th):
    assert c_sigma_closed(d, th) == pytest.approx(c_sigma_direct(d, th), rel=1e-9)


def test_c_sigma_dispatch():
    assert c_sigma(2, 0.5) == c_sigma_direct(2, 0.5)
    assert c_sigma(2, 1e-7) == c_sigma_closed(2, 1e-7)
    with pytest.raises(ValueError):
        c_sigma_direct(2, 0.0)


def test_eulerian_polynomial_rows():
    np.testing.assert_array_equal(eulerian_polynomial(3), [1, 4, 1])
    np.testing.assert_array_equal(eulerian_polynomial(4), [1, 11, 11, 1])


def test_condition_bound_scaling():
    p = HierarchyParams(c_q=1.0)
    assert condition_bound(p, 2.0) == pytest.approx(condition_bound(p, 1.0) / 2, rel=1e-15)
    assert decay_radius(p) == pytest.approx(math.sqrt(2) * 4, rel=1e-15)


def test_truncation_radius_closed_form(observed):
    p, c = observed
    r3 = select_truncation_radius(p, c, 3)
    assert r3.T == pytest.approx(4 * 2 * 9 * math.log(2) / c.theta, rel=1e-13)
    r6 = select_truncation_radius(p, c, 6)
    assert r6.T == pytest.approx(4 * r3.T, rel=1e-13)
    assert r3.L_squared_threshold == pytest.approx(-math.log(4 / c.theta) / math.log(0.5), rel=1e-13)
    assert r3.L_threshold_met == (9 >= r3.L_squared_threshold)


def test_truncation_radius_rejects_bad_theta(observed):
    p, c = observed
    from dataclasses import replace
    with pytest.raises(ValueError):
        select_truncation_radius(p, replace(c, theta=0.0), 3)
    with pytest.raises(ValueError):
        select_truncation_radius(replace(p, c_h=2.0), c, 3)


def test_calibrated_bound_curve(observed):
    p, c = observed
    expected = {2: 2.828, 3: 6.928, 4: 16.0, 5: 35.777, 7: 169.328}
    for L, v in expected.items():
        assert m_norm_bound(p, c, L, prefactor=1.0).value == pytest.approx(v, abs=1e-3)


def test_bound_dominates_measured_norm(observed):
    p, c = observed
    for L in (2, 3, 4):
        norm = matrix_two_norm(full_coupling(L))
        assert m_norm_bound(p, c, L).value >= norm
        assert m_norm_bound(p, c, L, prefactor=1.0).value >= norm


def test_bound_is_geometric_mean_of_factor_bounds(observed):
    p, c = observed
    b = m_norm_bound(p, c, 4)
    assert b.value == pytest.approx(math.sqrt(b.one_norm_bound * b.inf_norm_bound), rel=1e-12)


def test_norm_growth_per_level():
    norms = [matrix_two_norm(full_coupling(L)) for L in (2, 3, 4)]
    for a, b in zip(norms, norms[1:]):
        assert 1.8 <= b / a <= 2.6


def test_power_iteration_matches_dense_beyond_limit():
    rng = np.random.default_rng(3)
    n = 2100
    A = sp.random(n, n, density=2e-3, random_state=rng, format="csr") + sp.identity(n)
    ref = np.linalg.norm(A.toarray(), 2)
    assert matrix_two_norm(A) == pytest.approx(ref, rel=1e-8)


def test_power_iteration_zero_and_failure():
    assert matrix_two_norm(np.zeros((5, 5))) == 0.0
    assert matrix_two_norm(sp.csr_matrix((3000, 3000))) == 0.0
    with pytest.raises(PowerIterationError) as info:
        power_iteration(lambda v: np.diag([1.0, 0.999999]) @ v, 2, rtol=1e-15, max_iter=3)
    assert info.value.estimate > 0


def test_condition_of_identity():
    rep = condition_diagnostics(sp.identity(50, format="csr"))
    assert rep.kappa == pytest.approx(1.0, rel=1e-9)


def test_condition_matches_dense_and_is_level_independent():
    kappas = []
    for ell in (2, 3, 4, 5):
        A = grid_system(5).A(ell)
        rep = condition_diagnostics(A)
        if ell <= 4:
            assert rep.kappa == pytest.approx(np.linalg.cond(A.toarray()), rel=1e-6)
        kappas.append(rep.kappa)
    assert max(kappas) <= 2 * min(kappas)


def test_decreasing_paths():
    assert list(decreasing_paths(2, 1)) == [(2, 1)]
    assert sorted(decreasing_paths(3, 1)) == [(3, 1), (3, 2, 1)]
    assert len(list(decreasing_paths(5, 1))) == 8


def test_explicit_inverse_small_cases():
    X = dense_coupling(grid_system(3))
    sizes = grid_hierarchy(3).sizes
    inv = path_sum_inverse(X, sizes)
    off = np.cumsum([0] + sizes)
    np.testing.assert_allclose(inv[off[1]:off[2], :off[1]], -X[(2, 1)], atol=1e-14)
    np.testing.assert_allclose(inv[off[2]:, :off[1]], -X[(3, 1)] + X[(3, 2)] @ X[(2, 1)], atol=1e-12)


@pytest.mark.parametrize("L", [2, 3, 4])
def test_verify_explicit_inverse(L):
    rep = verify_explicit_inverse(grid_system(L))
    assert rep.passed
    assert len(rep.block_errors) == L * (L - 1) // 2
    if L > 1:
        assert rep.previous_power_norm > 1e-6  # (id - T')^(L-1) is not yet zero


def test_explicit_inverse_size_guard():
    with pytest.raises(ValueError):
        verify_explicit_inverse(grid_system(5))


def test_truncation_sweep_monotone_nnz_and_full_limit():
    rep = truncation_sweep(grid_system(3), [1, 2, 3, 4, 5, 6, 100])
    assert all(a <= b for a, b in zip(rep.nnz_ratio, rep.nnz_ratio[1:]))
    # diam / q_{L-1} = sqrt 2 * 8
    assert rep.nnz_ratio[-1] == 1.0 and rep.norm_ratio[-1] == 0.0
    assert rep.norm_ratio[0] > rep.norm_ratio[-2]


def test_decay_probe():
    hier = grid_hierarchy(4)
    for ell in (2, 3, 4):
        lv = hier.level(ell)
        rep = lagrange_decay_probe(grid_system(4).A(ell), lv.points, lv.q, level=ell)
        assert rep.theta_emp > 0
        assert rep.diagonal_dominant
        assert rep.correlation < -0.8


def test_fmt12_and_tables(tmp_path):
    assert fmt12(math.inf) == "full" and fmt12(3) == "3" and fmt12(0.1 + 0.2) == "0.3"
    path = tmp_path / "t.csv"
    write_table(path, ["a", "b"], [(1, 0.5)])
    write_table(path, ["a", "b"], [(2, math.inf)], append=True)
    assert path.read_text().splitlines() == ["a,b", "1,0.5", "2,full"]


def test_compute_theta_uses_c_phi():
    p = HierarchyParams(c_q=math.sqrt(2))
    assert compute_theta(p, c_phi=1.0) == bound_constants(p).theta
    assert compute_theta(p, c_phi=10.0) > compute_theta(p, c_phi=1.0)
