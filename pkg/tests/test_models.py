from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dtrdiv.errors import EvaluationError, StructuralError
from dtrdiv.models import (
    FeatureMaps,
    ModelQFunction,
    NuisanceComponent,
    PolicyComponent,
    empirical_grid,
    eval_g,
    eval_g_gradient,
    feature_preset,
    jacobian_condition_warning,
    load_model,
    save_model,
    to_tabular,
)
from dtrdiv.qcore import ActionSet, greedy_policy, policy_equivalent

finite = st.floats(-3, 3, allow_nan=False)


def scalar_pc(psi1=0.0, psi0=0.0) -> PolicyComponent:
    return PolicyComponent.zeros(FeatureMaps.linear_numeric_action(), 1).with_theta([psi1, psi0])


class TestPolicyComponent:
    def test_scalar_value(self):
        assert eval_g(scalar_pc(2.0, -1.0), [1.0], 3) == 3.0

    @given(finite, st.sampled_from([1, 2, 3]))
    def test_zero_parameters(self, x, a):
        assert eval_g(scalar_pc(), [x], a) == 0.0

    def test_mean_features_give_action_average(self):
        pc = scalar_pc(0.7, -0.4)
        # s0(a) = s1(a) = a, so the action average equals g at a = 2
        assert eval_g(pc, [1.3], 2) == pytest.approx(np.mean([eval_g(pc, [1.3], a) for a in (1, 2, 3)]), rel=1e-14)

    def test_gradient_by_hand(self):
        np.testing.assert_array_equal(eval_g_gradient(scalar_pc(2.0, -1.0), [1.5], 2), [3.0, 2.0])

    @given(finite, finite, finite, st.sampled_from([1, 2, 3]))
    def test_gradient_matches_central_differences(self, psi1, psi0, x, a):
        pc = scalar_pc(psi1, psi0)
        theta, h = pc.theta, 1e-6
        fd = []
        for j in range(theta.size):
            e = np.zeros_like(theta)
            e[j] = h
            fd.append((eval_g(pc.with_theta(theta + e), [x], a) - eval_g(pc.with_theta(theta - e), [x], a)) / (2 * h))
        assert np.max(np.abs(eval_g_gradient(pc, [x], a) - fd)) < 1e-6

    def test_same_action_gradient_difference_is_zero(self):
        pc = scalar_pc(1.0, 1.0)
        assert not np.any(eval_g_gradient(pc, [0.4], 2) - eval_g_gradient(pc, [0.4], 2))

    def test_multivariate_layout(self):
        pc = PolicyComponent.zeros(FeatureMaps.linear_numeric_action(), 2)
        pc = pc.with_theta([1.0, -2.0, 0.5])
        assert pc.Psi1.shape == (1, 2) and pc.psi0.tolist() == [0.5]
        assert eval_g(pc, [1.0, 1.0], 2) == pytest.approx(2 * (1.0 - 2.0 + 0.5))

    def test_dimension_checks(self):
        with pytest.raises(StructuralError):
            scalar_pc().with_theta([1.0])
        with pytest.raises(StructuralError):
            PolicyComponent(np.zeros(2), np.zeros((1, 1)), FeatureMaps.linear_numeric_action())

    def test_treatment_contrasts(self):
        maps = feature_preset("treatment_contrasts", (1, 2, 3))
        pc = PolicyComponent.zeros(maps, 1)
        assert pc.n_params == 4
        G = pc.design(np.array([[2.0]]))
        np.testing.assert_array_equal(G[0, 0], 0.0)
        np.testing.assert_array_equal(G[0, 2], [0.0, 2.0, 0.0, 1.0])

    def test_unknown_preset(self):
        with pytest.raises(ValueError):
            feature_preset("splines")


class TestModel:
    def truth(self) -> ModelQFunction:
        return ModelQFunction(NuisanceComponent.linear([-1.0, -2.0]), scalar_pc(2.0, -1.0))

    def test_zero_model_is_one(self):
        model = ModelQFunction(NuisanceComponent("absent"), scalar_pc())
        q = to_tabular(model, [([0.0], 0.5), ([1.0], 0.5)])
        np.testing.assert_array_equal(q.q, 1.0)

    def test_truth_at_x1(self):
        q = to_tabular(self.truth(), [([1.0], 1.0)])
        np.testing.assert_allclose(q.q[0], [math.exp(-3 + a) for a in (1, 2, 3)], rtol=1e-14)

    def test_shifting_nuisance_scales_q(self):
        grid = empirical_grid(np.linspace(0, 2, 5))
        base = self.truth()
        shifted = ModelQFunction(base.nuisance.with_alpha([-1.0, -1.5]), base.policy_part)
        q0, q1 = to_tabular(base, grid), to_tabular(shifted, grid)
        np.testing.assert_allclose(q1.q / q0.q, math.exp(0.5), rtol=1e-13)
        assert policy_equivalent(q0, q1)
        assert [greedy_policy(q0, x) for x in q0.x] == [greedy_policy(q1, x) for x in q1.x]

    def test_overflow_is_reported(self):
        model = ModelQFunction(NuisanceComponent.linear([0.0, 800.0]), scalar_pc())
        with pytest.raises(EvaluationError, match="overflow"):
            to_tabular(model, [([0.0], 1.0)])

    def test_theta_round_trip(self):
        model = self.truth()
        np.testing.assert_array_equal(model.with_theta(model.theta).theta, [2.0, -1.0, -1.0, -2.0])

    def test_fixed_function_nuisance(self):
        model = ModelQFunction(NuisanceComponent("fixed_function", func=lambda x: -((x[0] - 1.0) ** 2)), scalar_pc())
        np.testing.assert_allclose(model.qvalues_batch(np.array([[1.0], [2.0]]))[:, 0], [1.0, math.exp(-1)])

    def test_file_round_trip(self, tmp_path):
        save_model(self.truth(), tmp_path / "m.json")
        back = load_model(tmp_path / "m.json")
        np.testing.assert_array_equal(back.theta, self.truth().theta)
        X = np.linspace(-1, 2, 4)[:, None]
        np.testing.assert_array_equal(back.log_q_matrix(X), self.truth().log_q_matrix(X))


def test_condition_warning():
    assert jacobian_condition_warning(np.eye(2)) is None
    with pytest.warns(RuntimeWarning):
        msg = jacobian_condition_warning(np.array([[1.0, 1.0], [1.0, 1.0 + 1e-12]]))
    assert "near singular" in msg


def test_actions_default():
    assert scalar_pc().actions == ActionSet((1, 2, 3))
