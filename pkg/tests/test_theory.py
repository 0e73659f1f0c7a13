import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from gudl.core import StandardProblem, ValidationError
from gudl.theory import (
    TheoryReport,
    cubic_residual,
    estimate_assumption_constants,
    l_half,
    mse_sandwich_check,
    oracle_gap_bound,
    rip_constant_bruteforce,
    sgf_bound_numeric,
    sgf_brute_force,
    sgf_closed_form,
    sgf_evaluate,
    sparse_residual_ratio,
    sparsity_bounds,
)

from conftest import random_partial_orthogonal


def test_l_half_reference_values():
    assert l_half(np.eye(5)[2]) == 1.0
    assert_allclose(l_half(np.ones(9)), 3.0)
    v = np.zeros(20)
    v[[1, 4, 7, 11]] = [2.0, -2.0, 2.0, 2.0]
    assert_allclose(l_half(v), 2.0)
    with pytest.raises(ValidationError):
        l_half(np.zeros(4))


def test_sparse_residual_ratio_reference_values():
    assert_allclose(sparse_residual_ratio([2, 1, 1, 0], 1), 2 / 6)
    assert sparse_residual_ratio([0, 3, 0, -1], 2) == 0.0
    assert sparse_residual_ratio([1, 2, 3], 0) == 1.0
    # ties keep the lowest index; the ratio is unaffected
    assert_allclose(sparse_residual_ratio([1, 1, 1, 1], 2), 0.5)


@pytest.mark.parametrize("n2", [16, 64, 512])
def test_sgf_degenerate_kappas(n2):
    assert sgf_bound_numeric(1, n2) == 0.0
    assert sgf_bound_numeric(n2, n2) == 0.0
    assert sgf_closed_form(1, n2) == 0.0
    assert sgf_brute_force(1, min(n2, 64)) == 0.0
    with pytest.raises(ValidationError):
        sgf_bound_numeric(0, n2)
    with pytest.raises(ValidationError):
        sgf_bound_numeric(n2 + 1, n2)


@pytest.mark.parametrize("kappa", [16, 64])
def test_numeric_matches_closed_form_large(kappa):
    g = sgf_bound_numeric(kappa, 512)
    g_closed = sgf_closed_form(kappa, 512)
    assert 0 < g < 1
    assert abs(g - g_closed) < 1e-6


@pytest.mark.parametrize("kappa", [2, 3, 4, 7, 16, 100, 10_000])
def test_cubic_residual_small(kappa):
    assert abs(cubic_residual(kappa)) < 1e-10


def test_brute_force_bracket_on_fine_grid():
    brute = sgf_brute_force(4, 32, n_rho=200, n_lambda=200)
    g = sgf_bound_numeric(4, 32)
    assert brute <= g <= brute + 0.02


def test_brute_force_monotone_in_kappa():
    assert sgf_brute_force(4, 32) <= sgf_brute_force(8, 32)
    assert sgf_brute_force(2, 64) <= sgf_brute_force(4, 64)


def test_sgf_evaluate_record():
    ev = sgf_evaluate(8, 64)
    assert ev.kappa == 8 and ev.n2 == 64
    assert 0 < ev.x_opt < 56
    assert_allclose(ev.g_numeric, ev.g_closed, atol=1e-6)
    assert 0 < ev.rho_tilde < 1


def _feasible_vector(data, n2, kappa):
    """Random vector pushed into the ball ``l_half <= sqrt(kappa)`` by powering magnitudes."""
    raw = np.array(data.draw(st.lists(st.floats(0.01, 1.0), min_size=n2, max_size=n2)))
    signs = np.array(data.draw(st.lists(st.sampled_from([-1.0, 1.0]), min_size=n2, max_size=n2)))
    v = raw
    for _ in range(40):
        if l_half(v) <= math.sqrt(kappa):
            return signs * v
        v = (v / v.max()) ** 1.5
    # equal magnitudes never sharpen; fall back to a kappa-sparse vector
    v = raw.copy()
    v[np.argsort(-v, kind="stable")[kappa:]] = 0.0
    return signs * v


@settings(max_examples=60, deadline=None)
@given(data=st.data(), kappa=st.integers(2, 12))
def test_residual_ratio_below_sgf_for_feasible_vectors(data, kappa):
    n2 = 32
    a = _feasible_vector(data, n2, kappa)
    assert l_half(a) <= math.sqrt(kappa) + 1e-12
    assert sparse_residual_ratio(a, kappa) <= sgf_bound_numeric(kappa, n2) + 1e-9


def test_rip_zero_for_orthogonal_square(rng):
    Q, _ = np.linalg.qr(rng.standard_normal((10, 10)))
    for k in range(1, 6):
        assert rip_constant_bruteforce(Q, k) < 1e-12


def test_rip_order_one_is_column_norm_deviation(rng):
    A = rng.standard_normal((6, 12))
    assert_allclose(rip_constant_bruteforce(A, 1), np.max(np.abs(np.sum(A**2, axis=0) - 1)))


def test_rip_monotone_and_guarded(rng):
    A = random_partial_orthogonal(8, 16, rng) * math.sqrt(2)
    d = [rip_constant_bruteforce(A, k) for k in range(1, 6)]
    assert np.all(np.diff(d) >= -1e-12)
    assert rip_constant_bruteforce(A, 0) == 0.0
    with pytest.raises(ValidationError):
        rip_constant_bruteforce(A, 17)
    with pytest.raises(ValidationError):
        rip_constant_bruteforce(np.eye(64), 10)


def test_sparsity_bounds_limits():
    sb = sparsity_bounds(0.0, 0.0, 0.1, 9, 0.0, 0.0, 3, 256)
    assert_allclose(sb.s_ora, math.sqrt(6))
    assert math.ceil(sb.s_ora) == 3
    # with beta = delta = 0 the first term of s_G reduces to sqrt(2k)
    first = sb.s_G - math.sqrt(512) * math.sqrt(max(0.0, 1 - 1 / (9 * 0.1) ** 2))
    assert_allclose(first, math.sqrt(6))


def test_sparsity_bounds_snapshot():
    sb = sparsity_bounds(0.05, 0.03, 0.1, 9, 0.1, 0.1, 3, 256)
    assert sb.s_G == 512
    assert_allclose(sb.s_ora, 3.220951603644637, rtol=1e-12)
    assert sb.s == 512
    assert sb.vacuous
    assert any("exceeds" in n for n in sb.notes)


def test_sparsity_bounds_flags_bad_sqrt_argument():
    sb = sparsity_bounds(0.05, 0.03, 0.01, 1.0, 0.0, 0.0, 3, 256)
    assert sb.vacuous
    with pytest.raises(ValidationError):
        sparsity_bounds(1.0, 0.0, 0.1, 9, 0.0, 0.0, 3, 256)
    with pytest.raises(ValidationError):
        sparsity_bounds(0.1, 0.0, 0.1, 9, 0.0, 0.0, 3, 256, variant="other")


def _report(**kw):
    base = dict(beta=0.05, omega=0.03, xi=0.1, gamma=9, delta=0.001, delta_2k=0.001,
                delta_2=0.001, k=3, n_half=256, m_half=128)
    base.update(kw)
    return oracle_gap_bound(TheoryReport(**base))


def test_gap_bound_snapshot():
    r = _report()
    assert r.valid and r.s == 28 and r.T == 34
    assert_allclose(r.epsilon_1, 9.761372516700012, rtol=1e-12)
    assert_allclose(r.epsilon_2, 28.39950000446616, rtol=1e-12)
    assert_allclose(r.gap_bound, 0.43352647941084693, rtol=1e-10)
    text = r.as_text()
    assert "gap_bound=" in text and text.endswith("\n")


def test_gap_bound_zero_limits():
    assert _report(delta=0.0).gap_bound == 0.0


def test_gap_bound_monotone_in_delta():
    vals = [_report(delta=d).gap_bound for d in (0.0, 0.0005, 0.001, 0.002, 0.004)]
    assert np.all(np.diff(vals) >= 0)


def test_gap_bound_vacuous_regime_is_flagged():
    r = _report(delta=0.5)
    assert not r.valid
    assert math.isinf(r.gap_bound)


def test_assumption_constants_limits(small_A, rng):
    H = rng.standard_normal((5, 8))
    problem = StandardProblem(small_A, None, 0.1, y=H @ small_A.T + 0.1 * rng.standard_normal((5, 4)))
    beta, omega, xi = estimate_assumption_constants(H, H, H, problem)
    assert beta < 1e-12 and omega < 1e-12 and xi > 0
    beta, omega, _ = estimate_assumption_constants(np.zeros_like(H), np.zeros_like(H), H, problem)
    assert_allclose([beta, omega], [1.0, 1.0])


def test_sandwich_exact_estimate_holds(rng):
    A = random_partial_orthogonal(4, 8, rng)
    h = np.zeros(8)
    h[[1, 5]] = [1.0, -0.5]
    problem = StandardProblem(A, None, 0.0, u=A.T @ (A @ h))
    lhs, rhs, holds = mse_sandwich_check(h, h, problem, delta=0.2, T=3)
    assert lhs == 0.0 and rhs == 0.0 and holds


def test_sandwich_vacuous_delta_holds(rng):
    A = random_partial_orthogonal(4, 8, rng)
    H = np.zeros((20, 8))
    for row in H:
        row[rng.choice(8, 3, replace=False)] = rng.standard_normal(3)
    problem = StandardProblem(A, None, 0.0, u=np.zeros((20, 8)))
    _, _, holds = mse_sandwich_check(rng.standard_normal((20, 8)), H, problem, delta=1.0, T=4)
    assert np.all(holds)
