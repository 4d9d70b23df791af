import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spark_dfl.errors import ConfigurationError, ContractViolation
from spark_dfl.distillation import DistillSchedule, build_target, distill_objective, schedule_at, soft_labels
from spark_dfl.model import one_hot


def test_warmup_and_final_values():
    s = DistillSchedule(total_rounds=10)
    assert s.warmup_rounds == 2
    for k in (1, 2):
        assert schedule_at(s, k) == (1.0, 1.0)
    assert schedule_at(s, 10) == pytest.approx((0.3, 3.0), abs=1e-15)


def test_midpoint_exact():
    s = DistillSchedule(total_rounds=12, warmup_rounds=2)
    alpha, tau = schedule_at(s, 7)
    assert abs(alpha - 0.65) <= 1e-12
    assert abs(tau - 2.0) <= 1e-12


def test_out_of_range_round():
    s = DistillSchedule(total_rounds=5)
    for k in (0, 6):
        with pytest.raises(ContractViolation):
            schedule_at(s, k)


def test_invalid_schedules():
    with pytest.raises(ConfigurationError):
        DistillSchedule(total_rounds=5, warmup_rounds=5)
    with pytest.raises(ConfigurationError):
        DistillSchedule(total_rounds=5, alpha_init=0.2, alpha_final=0.5)
    with pytest.raises(ConfigurationError):
        DistillSchedule(total_rounds=5, tau_init=0.5)


def test_warm_forever_pins_warmup_values():
    s = DistillSchedule(total_rounds=5, warm_forever=True)
    assert all(schedule_at(s, k) == (1.0, 1.0) for k in range(1, 6))


@st.composite
def schedules(draw):
    r = draw(st.integers(2, 300))
    a_final = draw(st.floats(0, 1))
    a_init = draw(st.floats(a_final, 1))
    t_init = draw(st.floats(1, 5))
    t_final = draw(st.floats(t_init, 10))
    warm = draw(st.integers(0, r - 1))
    return DistillSchedule(r, a_init, a_final, t_init, t_final, warm)


@settings(max_examples=200, deadline=None)
@given(schedules())
def test_monotone_after_warmup(s):
    vals = [schedule_at(s, k) for k in range(s.warmup_rounds + 1, s.total_rounds + 1)]
    alphas, taus = [v[0] for v in vals], [v[1] for v in vals]
    assert all(b <= a + 1e-15 for a, b in zip(alphas, alphas[1:]))
    assert all(b >= a - 1e-15 for a, b in zip(taus, taus[1:]))
    assert abs(alphas[-1] - s.alpha_final) <= 1e-12
    assert abs(taus[-1] - s.tau_final) <= 1e-12


def test_continuity_at_phase_boundary_with_default_starts():
    s = DistillSchedule(total_rounds=1000, warmup_rounds=200)
    a, t = schedule_at(s, 201)
    assert a == pytest.approx(1.0, abs=1e-4) and t == pytest.approx(1.0, abs=1e-2)


def test_soft_labels_examples():
    np.testing.assert_allclose(soft_labels(np.zeros((2, 4)), 3.0), 0.25)
    np.testing.assert_allclose(soft_labels([[2.0, 0.0]], 2.0)[0], [0.7310585786, 0.2689414214], atol=1e-10)
    z = np.random.default_rng(0).normal(size=(3, 5))
    np.testing.assert_allclose(soft_labels(z + 7.0, 1.5), soft_labels(z, 1.5), atol=1e-15)
    prev = soft_labels([[2.0, 0.0]], 1.0)[0, 0]
    for tau in (1.5, 2, 4, 10, 100):
        cur = soft_labels([[2.0, 0.0]], tau)[0, 0]
        assert 0.5 < cur < prev
        prev = cur
    with pytest.raises(ContractViolation):
        soft_labels([[0.0]], 0.5)


def test_soft_labels_large_logits_are_stable():
    p = soft_labels([[1000.0, 0.0, -1000.0]], 1.0)
    assert np.all(np.isfinite(p)) and p[0, 0] == pytest.approx(1.0)


def test_warmup_target_is_exactly_hard():
    hard = one_hot([0, 2, 1], 3)
    t = build_target(hard, np.random.default_rng(1).normal(size=(3, 3)), DistillSchedule(10), 1)
    np.testing.assert_array_equal(t.rows, hard)
    assert (t.alpha, t.tau) == (1.0, 1.0)


def test_alpha_zero_gives_soft_target():
    s = DistillSchedule(4, alpha_init=0.0, alpha_final=0.0, warmup_rounds=0)
    z = np.random.default_rng(2).normal(size=(2, 3))
    t = build_target(one_hot([0, 1], 3), z, s, 2)
    np.testing.assert_allclose(t.rows, soft_labels(z, t.tau), atol=1e-15)


def test_convex_mix_by_hand():
    s = DistillSchedule(12, warmup_rounds=2)
    t = build_target(one_hot([1], 4), np.zeros((1, 4)), s, 7)
    np.testing.assert_allclose(t.rows[0], [0.35 / 4, 0.65 + 0.35 / 4, 0.35 / 4, 0.35 / 4], atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(schedules(), st.integers(0, 10_000))
def test_targets_are_row_stochastic(s, seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(6, 5)) * 10
    for k in (1, s.total_rounds, max(1, s.total_rounds // 2)):
        rows = build_target(one_hot(rng.integers(0, 5, 6), 5), z, s, k).rows
        assert np.all(rows >= 0) and np.all(rows <= 1)
        np.testing.assert_allclose(rows.sum(axis=1), 1.0, atol=1e-9)


def test_target_rejects_mismatch_and_bad_hard_rows():
    s = DistillSchedule(5)
    with pytest.raises(ContractViolation):
        build_target(one_hot([0, 1], 3), np.zeros((3, 3)), s, 1)
    with pytest.raises(ContractViolation):
        build_target(np.full((1, 2), 0.5), np.zeros((1, 2)), s, 1)


def test_distill_objective_reduces_to_cross_entropy_at_alpha_one():
    z = np.array([[1.0, 2.0, 0.5]])
    hard = one_hot([1], 3)
    ce = -math.log(math.exp(2) / (math.exp(1) + math.exp(2) + math.exp(0.5)))
    assert distill_objective(z, hard, soft_labels(z, 2.0), 1.0, 2.0) == pytest.approx(ce)
    # soft targets equal to the tempered prediction give zero KL
    assert distill_objective(z, hard, soft_labels(z, 2.0), 0.0, 2.0) == pytest.approx(0.0, abs=1e-15)
