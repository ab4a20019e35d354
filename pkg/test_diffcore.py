"""
Tape gradients: first order, tape over tape, unrolled inner loops and the
finite-difference checker.
"""

from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

import diffcore as dc
from costs import CostKind, init_params
from env import rollout_positions
from errors import DivergenceError, NumericDomainError


def _sum_sq(u):
    return dc.vsum(u * u)


# ============================================================================
# FIRST ORDER
# ============================================================================


def test_quadratic_gradient():
    assert dc.grad_wrt_actions(_sum_sq, [1.0, -2.0, 3.0]).tolist() == [2.0, -4.0, 6.0]


def test_constant_cost_has_zero_gradient():
    grad = dc.grad_wrt_actions(lambda u: dc.const(5.0), np.array([0.3, -1.0, 2.0]))
    assert grad.tolist() == [0.0, 0.0, 0.0]


def test_non_finite_cost_reports_index():
    with pytest.raises(NumericDomainError) as info:
        dc.grad_wrt_actions(lambda u: dc.vsum(u * np.inf), np.array([1.0, 2.0]))
    assert info.value.index == 0


def test_non_finite_action_reports_index():
    with pytest.raises(NumericDomainError) as info:
        dc.grad_wrt_actions(_sum_sq, np.array([1.0, np.nan, 0.0]))
    assert info.value.index == 1


def test_primitives_match_finite_differences():
    rng = np.random.default_rng(3)
    w = rng.uniform(-1, 1, size=(4, 3))

    def fn(x):
        h = dc.sigmoid(dc.matmul(x, w) + 0.1)
        c = dc.cumsum(dc.sin(h) * dc.cos(x[:, 0:3]), axis=0)
        scattered = dc.embed(c[1:], (slice(0, 4),), (5, 3))
        return dc.mean(dc.exp(scattered * 0.5)) + dc.vsum(x ** 3) / (dc.vsum(x * x) + 1.0)

    report = dc.check_gradient(fn, rng.uniform(-1, 1, size=(5, 4)))
    assert report.max_rel_error < 1e-5


def test_rbf_cost_on_five_step_rollout_matches_finite_differences():
    params = init_params(CostKind.LRBF, 0, num_centers=3, base_duration=1.0)
    goal = np.array([1.0, 0.0, 0.0])

    def cost(u):
        positions = rollout_positions(np.zeros(3), u, 0.2)
        return params.cost_var(dc.const(params.flat), positions, goal, 1.0, 0.2)

    u = np.random.default_rng(0).uniform(-1, 1, size=(5, 3))
    report = dc.check_gradient(cost, u)
    assert np.allclose(report.analytic, dc.grad_wrt_actions(cost, u))
    assert report.max_rel_error < 1e-6


def test_gradient_is_linear_in_the_function():
    rng = np.random.default_rng(1)
    x = rng.uniform(-1, 1, size=6)
    f = lambda v: dc.vsum(dc.sin(v) * v)
    g = lambda v: dc.vsum(dc.exp(v * 0.3))
    combined = dc.grad_wrt_actions(lambda v: 2.0 * f(v) + 3.0 * g(v), x)
    separate = 2.0 * dc.grad_wrt_actions(f, x) + 3.0 * dc.grad_wrt_actions(g, x)
    assert np.allclose(combined, separate, rtol=1e-14, atol=1e-14)


def test_repeated_runs_are_bit_identical():
    x = np.random.default_rng(2).uniform(-1, 1, size=(4, 3))
    f = lambda v: dc.mean(dc.sigmoid(v) * v)
    assert np.array_equal(dc.grad_wrt_actions(f, x), dc.grad_wrt_actions(f, x))


# ============================================================================
# TAPE MECHANICS
# ============================================================================


def test_second_derivative_through_recorded_gradient():
    tape = dc.Tape()
    x = tape.var([2.0])
    y = dc.vsum(x ** 3)
    (g,) = tape.gradient(y, [x], create_graph=True)
    assert g.value.tolist() == [12.0]
    (h,) = tape.gradient(dc.vsum(g), [x])
    assert h.value.tolist() == pytest.approx([12.0])


def test_first_order_gradient_is_not_recorded():
    tape = dc.Tape()
    x = tape.var([1.0, 2.0])
    y = dc.vsum(x * x)
    before = len(tape)
    (g,) = tape.gradient(y, [x])
    assert g.tape is None
    assert len(tape) == before


def test_no_record_yields_constants():
    tape = dc.Tape()
    x = tape.var([1.0])
    with dc.no_record():
        y = x * 2.0
    assert y.tape is None
    assert (x * 2.0).tape is tape


def test_mixing_tapes_is_rejected():
    a = dc.Tape().var([1.0])
    b = dc.Tape().var([1.0])
    with pytest.raises(ValueError):
        a + b


def test_independent_tapes_on_threads_agree():
    x = np.linspace(-1, 1, 7)
    f = lambda v: dc.vsum(dc.sigmoid(v) * dc.sin(v))
    with ThreadPoolExecutor(max_workers=4) as executor:
        grads = list(executor.map(lambda _: dc.grad_wrt_actions(f, x), range(8)))
    for g in grads[1:]:
        assert np.array_equal(g, grads[0])


# ============================================================================
# INNER LOOP
# ============================================================================


def _toy_inner(alpha=0.5, steps=2, truncate=None):
    params = init_params(CostKind.LRBF, 0, num_centers=3, base_duration=1.0)
    goal = np.array([1.0, 0.5, -0.5])

    def cost(phi, u):
        return params.cost_var(phi, rollout_positions(np.zeros(3), u, 0.2), goal, 1.0, 0.2)

    return params, dc.InnerLoop(cost=cost, u0=np.zeros((5, 3)), alpha=alpha, steps=steps, truncate=truncate)


def _toy_outer():
    demo = np.random.default_rng(4).uniform(-1, 1, size=(6, 3))
    return lambda u: dc.mean(dc.vsum((rollout_positions(np.zeros(3), u, 0.2) - demo) ** 2, axis=1))


def test_zero_step_size_leaves_actions_at_start():
    params, inner = _toy_inner(alpha=0.0, steps=1)
    outer = _toy_outer()
    loss, grad, u = dc.unrolled_value_and_grad(params.flat, inner, outer)
    assert np.array_equal(u, np.zeros((5, 3)))
    assert loss == pytest.approx(outer(dc.const(np.zeros((5, 3)))).item())
    assert np.all(grad == 0.0)


def test_cost_constant_in_actions_gives_zero_outer_gradient():
    inner = dc.InnerLoop(cost=lambda phi, u: dc.vsum(phi * phi), u0=np.zeros((5, 3)), alpha=0.1, steps=3)
    grad = dc.grad_through_inner_loop(np.ones(4), inner, _toy_outer())
    assert grad.tolist() == [0.0, 0.0, 0.0, 0.0]


def test_unrolled_gradient_matches_finite_differences():
    params, inner = _toy_inner()
    outer = _toy_outer()
    phi = np.random.default_rng(5).uniform(-1, 1, size=params.size)
    report = dc.check_gradient(lambda p: outer(inner.run(p)), phi)
    assert np.allclose(report.analytic, dc.grad_through_inner_loop(phi, inner, outer))
    assert report.max_rel_error < 1e-4


def test_truncation_covering_every_step_equals_full_unroll():
    params, full = _toy_inner(steps=3)
    _, covered = _toy_inner(steps=3, truncate=3)
    _, last_only = _toy_inner(steps=3, truncate=1)
    outer = _toy_outer()
    g_full = dc.grad_through_inner_loop(params.flat, full, outer)
    assert np.array_equal(g_full, dc.grad_through_inner_loop(params.flat, covered, outer))
    assert not np.allclose(g_full, dc.grad_through_inner_loop(params.flat, last_only, outer))


def test_divergent_inner_loop_raises():
    inner = dc.InnerLoop(cost=lambda phi, u: dc.vsum(dc.exp(u)) + dc.vsum(phi),
                         u0=np.zeros(3), alpha=np.inf, steps=2)
    with pytest.raises(DivergenceError) as info:
        inner.run(dc.const(np.zeros(2)))
    assert info.value.step == 0


# ============================================================================
# CHECKER
# ============================================================================


def test_check_gradient_square():
    report = dc.check_gradient(lambda x: dc.vsum(x * x), [2.0], eps=1e-4)
    assert report.analytic[0] == 4.0
    assert report.numeric[0] == pytest.approx(4.0, abs=1e-7)
    assert report.eps == 1e-4


def test_check_gradient_sine_at_zero():
    report = dc.check_gradient(lambda x: dc.vsum(dc.sin(x)), [0.0])
    assert report.analytic[0] == pytest.approx(1.0)
    assert report.numeric[0] == pytest.approx(1.0)
    assert report.max_rel_error >= 0


def test_check_gradient_rejects_non_positive_eps():
    with pytest.raises(ValueError):
        dc.check_gradient(_sum_sq, [1.0], eps=0.0)


def test_non_finite_gradient_lands_in_the_report():
    report = dc.check_gradient(lambda x: dc.vsum(x * np.inf), [1.0])
    assert report.max_rel_error == float("inf")
    assert not report.passed(1.0)


def test_report_rejects_unequal_lengths():
    with pytest.raises(ValueError):
        dc.GradientReport(np.zeros(2), np.zeros(3), 0.0, 1e-5)


def test_lambda_mlp_cost_with_random_params_passes():
    params = init_params(CostKind.LMLP, 0)
    goal = np.array([0.0, 10.0, 0.0])
    rng = np.random.default_rng(0)
    for _ in range(8):
        positions = rng.uniform(-1, 1, size=(4, 3)) + goal
        fn = lambda p: params.cost_var(p, dc.const(positions), goal, 0.8, 0.2)
        assert dc.check_gradient(fn, params.flat).max_rel_error < 1e-4
