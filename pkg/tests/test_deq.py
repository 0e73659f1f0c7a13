import warnings

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from gudl.core import StandardProblem, ValidationError
from gudl.deq import (
    DeqConfig,
    forward_fixed_point,
    implicit_gradient_dense,
    jfb_gradient,
    layer_jacobian,
    le_lipschitz,
    le_step,
    output_norm_certificate,
)
from gudl.neural import init_nle, linear_nle

from conftest import random_partial_orthogonal


class AffineModel:
    """``R(x) = a x + b`` (not zero-preserving; used only as a solver oracle)."""

    def __init__(self, a, b):
        self.a, self.b = a, np.asarray(b)

    def forward(self, x):
        return self.a * np.asarray(x) + self.b


def problem_with(A, y, c=None, sigma2=0.0):
    return StandardProblem(A, c, sigma2, y=y)


def test_gamma():
    assert DeqConfig().gamma == pytest.approx(9.0)
    with pytest.raises(ValidationError):
        DeqConfig(lip_target=1.0)
    with pytest.raises(ValidationError):
        DeqConfig(eta=0)


def test_le_step_examples(small_A, rng):
    cfg = DeqConfig()
    y = rng.standard_normal(4)
    p = problem_with(small_A, y)
    assert_allclose(le_step(p, cfg, p.u), p.u, atol=1e-12)
    h = rng.standard_normal(8)
    h -= small_A.T @ (small_A @ h)
    assert_allclose(le_step(p, cfg, h), h + p.u, atol=1e-12)
    h1, h2 = rng.standard_normal((2, 8))
    d = np.linalg.norm(le_step(p, cfg, h1) - le_step(p, cfg, h2))
    assert d <= np.linalg.norm(h1 - h2) + 1e-12


def test_le_lipschitz(small_A):
    assert le_lipschitz(StandardProblem(small_A), 1.0) == 1.0
    assert le_lipschitz(StandardProblem(small_A, np.full(4, 0.25)), 1.0) == pytest.approx(3.0)


def test_affine_contraction_closed_form(small_A, rng):
    b = rng.standard_normal(8)
    b -= small_A.T @ (small_A @ b)
    p = problem_with(small_A, np.zeros(4))
    res = forward_fixed_point(AffineModel(0.5, b), p, DeqConfig(tol=1e-10))
    assert res.converged
    assert_allclose(res.h_star, 2 * b, rtol=1e-9)


def test_initialisation_independence(rng):
    A = random_partial_orthogonal(16, 32, rng)
    model = init_nle(32, rng=1)
    p = problem_with(A, rng.standard_normal(16))
    cfg = DeqConfig()
    a = forward_fixed_point(model, p, cfg)
    b = forward_fixed_point(model, p, cfg, h0=rng.standard_normal(32))
    assert a.converged and b.converged
    assert np.linalg.norm(a.h_star - b.h_star) <= 10 * cfg.tol * np.linalg.norm(a.h_star)


def test_linear_rate(rng):
    A = random_partial_orthogonal(16, 32, rng)
    model = init_nle(32, rng=2)
    p = problem_with(A, rng.standard_normal(16))
    res = forward_fixed_point(model, p, DeqConfig(tol=1e-12), record=True)
    steps = res.step_norms[~np.isnan(res.step_norms)]
    ratios = steps[1:] / steps[:-1]
    assert np.all(ratios[2:] <= 0.9 + 0.05)


def test_batched_rows_match_single(rng):
    A = random_partial_orthogonal(8, 16, rng)
    model = init_nle(16, rng=3)
    Y = rng.standard_normal((5, 8))
    cfg = DeqConfig()
    batch = forward_fixed_point(model, problem_with(A, Y), cfg)
    for i in range(5):
        single = forward_fixed_point(model, problem_with(A, Y[i]), cfg)
        assert_allclose(batch.h_star[i], single.h_star, atol=1e-14)
        assert batch.iterations[i] == single.iterations


def test_non_convergence_reported(rng):
    A = random_partial_orthogonal(8, 16, rng)
    res = forward_fixed_point(init_nle(16, rng=0), problem_with(A, rng.standard_normal(8)),
                              DeqConfig(max_iter=2, tol=1e-12))
    assert not res.converged and res.iterations == 2
    assert res.final_residual > 1e-12


def test_jfb_zero_cotangent(small_A, rng):
    model = linear_nle(0.5 * np.eye(8))
    p = problem_with(small_A, rng.standard_normal(4))
    h = forward_fixed_point(model, p, DeqConfig()).h_star
    (g,) = jfb_gradient(model, p, DeqConfig(), h, np.zeros(8))
    assert_array_equal(g, 0)


def test_jfb_unconverged_warns(small_A, rng):
    model = linear_nle(0.5 * np.eye(8))
    p = problem_with(small_A, rng.standard_normal(4))
    with pytest.warns(RuntimeWarning):
        jfb_gradient(model, p, DeqConfig(), np.zeros(8), np.ones(8), converged=False)


def test_layer_jacobian_matches_finite_difference(small_A, rng):
    model = init_nle(8, channels=(1, 3, 1), rng=4, init_threshold=0.0)
    p = problem_with(small_A, rng.standard_normal(4))
    h = rng.standard_normal(8)
    J = layer_jacobian(model, p, DeqConfig(), h)
    cfg = DeqConfig()
    f = lambda v: model.forward(le_step(p, cfg, v))  # noqa: E731
    num = np.stack([(f(h + 1e-6 * e) - f(h - 1e-6 * e)) / 2e-6 for e in np.eye(8)], axis=1)
    assert_allclose(J, num, atol=1e-7)


def test_jfb_small_contraction_matches_implicit(small_A, rng):
    cfg = DeqConfig(tol=1e-12)
    for _ in range(5):
        model = linear_nle(1e-3 * rng.standard_normal((8, 8)))
        p = problem_with(small_A, rng.standard_normal(4))
        h = forward_fixed_point(model, p, cfg).h_star
        cot = rng.standard_normal(8)
        (jfb,) = jfb_gradient(model, p, cfg, h, cot)
        (exact,) = implicit_gradient_dense(model, p, cfg, h, cot)
        assert np.linalg.norm(jfb - exact) <= 0.01 * np.linalg.norm(exact)


def test_implicit_gradient_matches_finite_difference(small_A, rng):
    cfg = DeqConfig(tol=1e-13, max_iter=2000)
    W = 0.6 * random_partial_orthogonal(8, 8, rng)
    model = linear_nle(W)
    p = problem_with(small_A, rng.standard_normal(4))
    cot = rng.standard_normal(8)
    h = forward_fixed_point(model, p, cfg).h_star
    (exact,) = implicit_gradient_dense(model, p, cfg, h, cot)
    num = np.zeros_like(W)
    for idx in np.ndindex(W.shape):
        vals = []
        for s in (1, -1):
            Wp = W.copy()
            Wp[idx] += s * 1e-6
            vals.append(cot @ forward_fixed_point(linear_nle(Wp), p, cfg).h_star)
        num[idx] = (vals[0] - vals[1]) / 2e-6
    assert_allclose(exact, num, rtol=1e-5, atol=1e-7)


def test_implicit_gradient_size_limit(rng):
    A = random_partial_orthogonal(40, 80, rng)
    with pytest.raises(ValidationError):
        implicit_gradient_dense(linear_nle(np.eye(80) * 0.5), problem_with(A, np.zeros(40)), DeqConfig(),
                                np.zeros(80), np.zeros(80))


def test_output_norm_certificate(rng):
    A = random_partial_orthogonal(16, 32, rng)
    model = init_nle(32, rng=5)
    cfg = DeqConfig()
    p = problem_with(A, rng.standard_normal((20, 16)))
    bound, actual = output_norm_certificate(model, p, cfg)
    assert_allclose(bound, 9 * np.linalg.norm(p.u, axis=1))
    assert np.all(actual <= bound * (1 + 1e-6))
    b0, a0 = output_norm_certificate(model, p, cfg, u=np.zeros(32))
    assert b0 == 0 and a0 == 0


def test_certificate_rejects_expansive_linear_step(rng):
    A = random_partial_orthogonal(4, 8, rng)
    p = StandardProblem(A, np.full(4, 0.1), y=np.ones(4))
    with pytest.raises(ValidationError):
        output_norm_certificate(init_nle(8, rng=0), p, DeqConfig())
