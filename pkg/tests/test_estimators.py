from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dtrdiv.errors import DegenerateDataError, InvalidRecordError, SingularIndexError, StructuralError
from dtrdiv.estimators import (
    FitConfig,
    FitResult,
    beta_loss,
    ekl_loss,
    fit,
    fit_backward,
    fit_beta_mde,
    fit_gamma_mde,
    fit_ml,
    fit_propensity,
    gamma_estimating_function,
    gamma_loss,
    ml_estimating_function,
    ml_loss,
    sandwich,
    stage_design,
    with_fitted_propensities,
)
from dtrdiv.estimators import losses as L
from dtrdiv.estimators.optim import minimize, numeric_jacobian
from dtrdiv.qcore import StageData, TrajectoryDataset
from dtrdiv.simulate import ACTIONS, ScenarioConfig, generate_correct, policy_template, working_model

TRUTH = np.array([2.0, -1.0])
ALPHA = np.array([-1.0, -2.0])

# mpmath evaluations of the one-record loss at x=1, a=2, y=1, p=1/3, psi=(2, -1)
ORACLE_LOSS = {1.0: -1.0275182968861358737, -1.5: 0.057979728893306777310}


def one_record(x=1.0, a=2, y=1.0, p=1 / 3):
    return TrajectoryDataset.single_stage([[x]], [a], [y], [p], ACTIONS)


def noiseless(xs=(0.0, 1.0, 2.0), scenario="correct"):
    """Every action at every covariate value, outcome equal to its conditional mean."""
    cfg = ScenarioConfig(scenario)
    from dtrdiv.simulate import true_q

    x = np.repeat(xs, 3)
    a = np.tile([1, 2, 3], len(xs))
    return TrajectoryDataset.single_stage(x[:, None], a, true_q(cfg, x, a), np.full(x.size, 1 / 3), ACTIONS)


@pytest.fixture(scope="module")
def correct_data():
    return generate_correct(ScenarioConfig(n=500), 123)


class TestGammaLoss:
    @pytest.mark.parametrize("gamma", [1.0, -1.5])
    def test_one_record_oracle(self, gamma):
        assert gamma_loss(TRUTH, one_record(), policy_template(), gamma) == pytest.approx(ORACLE_LOSS[gamma], rel=1e-13)

    @pytest.mark.parametrize("gamma", [-2.0, -1.5, 0.5, 1.0])
    def test_constant_g_collapse(self, gamma, correct_data):
        s = correct_data.stage(1)
        expected = -(1 / gamma) * 3 ** (-gamma / (gamma + 1)) * np.mean(s.y / s.p)
        assert gamma_loss(np.zeros(2), correct_data, policy_template(), gamma) == pytest.approx(expected, rel=1e-12)

    def test_action_constant_shift_cancels(self, correct_data):
        # adding c * x to g(x, a) for every a: change psi0 direction by a feature that is constant in a
        d = stage_design(correct_data, policy_template())
        shift = np.random.default_rng(0).normal(size=d.n)[:, None, None] * np.ones((1, 3, 1))
        shifted = L.StageDesign(np.concatenate([d.G, shift], axis=2), d.obs, d.y, d.p)
        base = L.gamma_loss_design(TRUTH, d, 0.5)
        assert L.gamma_loss_design(np.append(TRUTH, 1.7), shifted, 0.5) == pytest.approx(base, rel=1e-12)

    @pytest.mark.parametrize("gamma", [0.0, -1.0])
    def test_singular(self, gamma):
        with pytest.raises(SingularIndexError):
            gamma_loss(TRUTH, one_record(), policy_template(), gamma)

    def test_missing_propensity(self):
        data = TrajectoryDataset.single_stage([[1.0]], [1], [1.0], None, ACTIONS)
        with pytest.raises(InvalidRecordError, match="fit_propensity"):
            gamma_loss(TRUTH, data, policy_template(), 1.0)

    @settings(max_examples=60, deadline=None)
    @given(
        st.sampled_from([-1.5, 0.5, 1.0]),
        st.floats(-2, 2), st.floats(-2, 2), st.floats(-1, 3),
        st.sampled_from([1, 2, 3]), st.floats(0.01, 10), st.floats(0.05, 1),
    )
    def test_estimating_function_is_minus_gradient(self, gamma, psi1, psi0, x, a, y, p):
        psi = np.array([psi1, psi0])
        data = one_record(x, a, y, p)
        E = gamma_estimating_function(psi, (np.array([x]), a, y, p), policy_template(), gamma)
        fd = numeric_jacobian(lambda t: np.array([gamma_loss(t, data, policy_template(), gamma)]), psi)[0]
        # central differences carry roundoff of order 1e-8 * |L|, which dominates at a zero gradient
        loss = gamma_loss(psi, data, policy_template(), gamma)
        assert np.max(np.abs(-E - fd)) < 1e-5 * np.max(np.abs(fd)) + 1e-8 * max(1.0, abs(loss))

    def test_constant_features_give_zero(self):
        pc = policy_template()
        from dtrdiv.models import FeatureMaps, PolicyComponent

        flat = PolicyComponent.zeros(FeatureMaps(lambda a: [1.0], lambda a: [1.0], pc.features.t), 1)
        E = gamma_estimating_function([0.3, -0.2], (np.array([0.7]), 2, 1.5, 1 / 3), flat, 0.5)
        np.testing.assert_array_equal(E, 0.0)

    def test_unweighted_form_at_minus_one(self):
        x, a, y, p = 1.2, 3, 2.0, 0.25
        E = gamma_estimating_function(TRUTH, (np.array([x]), a, y, p), policy_template(), -1.0)
        g = a * (TRUTH[0] * x + TRUTH[1])
        np.testing.assert_allclose(E, y / p * math.exp(-g) * np.array([(a - 2) * x, a - 2]), rtol=1e-14)


class TestBetaAndML:
    def test_beta_zero_parameters(self):
        beta = -1.5
        value = beta_loss(np.zeros(2), np.zeros(2), one_record(y=1.0, p=1.0), working_model(), beta)
        assert value == pytest.approx(-1 / beta + 3 / (beta + 1), rel=1e-14)

    def test_beta_sees_nuisance_shift(self):
        data = one_record()
        assert beta_loss(ALPHA + [0, 0.5], TRUTH, data, working_model(), 0.5) != pytest.approx(
            beta_loss(ALPHA, TRUTH, data, working_model(), 0.5), rel=1e-6
        )

    def test_beta_singular(self):
        with pytest.raises(SingularIndexError):
            beta_loss(ALPHA, TRUTH, one_record(), working_model(), -1.0)

    def test_beta_population_minimum_at_truth(self):
        data = generate_correct(ScenarioConfig(n=100_000), 99)
        at_truth = beta_loss(ALPHA, TRUTH, data, working_model(), -1.5)
        for d_psi, d_alpha in [([0.3, 0], [0, 0]), ([0, -0.3], [0, 0]), ([0, 0], [0.3, 0]), ([0, 0], [0, -0.3])]:
            assert at_truth < beta_loss(ALPHA + d_alpha, TRUTH + d_psi, data, working_model(), -1.5)

    def test_ekl_limit_of_beta(self, correct_data):
        # beta -> 0: beta_loss = const(beta) + ekl_loss + O(beta); differences in parameters converge
        a = beta_loss(ALPHA, TRUTH, correct_data, working_model(), 1e-6) - beta_loss(ALPHA * 0.9, TRUTH, correct_data, working_model(), 1e-6)
        b = ekl_loss(ALPHA, TRUTH, correct_data, working_model()) - ekl_loss(ALPHA * 0.9, TRUTH, correct_data, working_model())
        assert a == pytest.approx(b, rel=1e-4)

    def test_ml_zero_parameters(self, correct_data):
        assert ml_loss(np.zeros(2), np.zeros(2), correct_data, working_model()) == pytest.approx(
            correct_data.stage(1).y.mean(), rel=1e-14
        )
        assert ml_loss(np.zeros(2), np.zeros(2), one_record(y=1.0), working_model()) == 1.0

    def test_ml_estimating_function_is_score(self):
        rec = (np.array([0.8]), 2, 1.3)
        E = ml_estimating_function(ALPHA, TRUTH, rec, working_model())
        data = TrajectoryDataset.single_stage([[0.8]], [2], [1.3], None, ACTIONS)
        theta = np.concatenate([TRUTH, ALPHA])
        fd = numeric_jacobian(lambda t: np.array([ml_loss(t[2:], t[:2], data, working_model())]), theta)[0]
        np.testing.assert_allclose(-E, fd, rtol=1e-6)

    def test_poisson_family(self):
        data = TrajectoryDataset.single_stage([[0.0]], [1], [2.0], None, ACTIONS)
        # eta = 0: Poisson negative log-likelihood (without log y!) is exp(0) - 2 * 0 = 1
        assert ml_loss(np.zeros(2), np.zeros(2), data, working_model(), "poisson") == pytest.approx(1.0)
        with pytest.raises(ValueError):
            L.outcome_family("gamma")


@pytest.fixture(scope="module")
def big():
    return generate_correct(ScenarioConfig(n=100_000), 2024)


class TestUnbiasedness:
    @pytest.mark.parametrize("gamma", [-1.5, 1.0, -1.0])
    def test_gamma(self, big, gamma):
        d = stage_design(big, policy_template())
        E = L.gm_estfun_design(TRUTH, d) if gamma == -1 else L.gamma_estfun_design(TRUTH, d, gamma)
        z = E.mean(axis=0) / (E.std(axis=0, ddof=1) / math.sqrt(d.n))
        assert np.all(np.abs(z) < 3)

    def test_ml(self, big):
        d = stage_design(big, working_model())
        E = L.ml_estfun_design(np.concatenate([TRUTH, ALPHA]), d)
        z = E.mean(axis=0) / (E.std(axis=0, ddof=1) / math.sqrt(d.n))
        assert np.all(np.abs(z) < 3)


class TestOptimizer:
    @pytest.mark.parametrize("optimizer", ["quasi_newton", "nelder_mead"])
    def test_rosenbrock(self, optimizer):
        def f(x):
            return (1 - x[0]) ** 2 + 100 * (x[1] - x[0] ** 2) ** 2

        def g(x):
            return np.array([-2 * (1 - x[0]) - 400 * x[0] * (x[1] - x[0] ** 2), 200 * (x[1] - x[0] ** 2)])

        res = minimize(f, g, np.array([-1.2, 1.0]), optimizer, 5000, 1e-8)
        assert res.converged
        np.testing.assert_allclose(res.x, [1.0, 1.0], atol=1e-6)

    def test_non_finite_start_reports_failure(self):
        res = minimize(lambda x: np.nan, lambda x: np.full(2, np.nan), np.zeros(2), "quasi_newton", 50, 1e-8)
        assert not res.converged


class TestFitting:
    @pytest.mark.parametrize("gamma", [-1.5, -1.0, 0.5])
    def test_noiseless_recovers_truth(self, gamma):
        res = fit_gamma_mde(noiseless(), policy_template(), FitConfig("gamma_mde", gamma))
        assert res.converged
        np.testing.assert_allclose(res.psi_hat, TRUTH, atol=1e-6)

    def test_noiseless_beta_recovers_truth(self):
        res = fit_beta_mde(noiseless(), working_model(), FitConfig("beta_mde", -1.5))
        assert res.converged
        np.testing.assert_allclose(res.theta, np.concatenate([TRUTH, ALPHA]), atol=1e-6)

    def test_noiseless_ml_recovers_truth(self):
        res = fit_ml(noiseless(), working_model(), FitConfig("ml", 0.0))
        np.testing.assert_allclose(res.theta, np.concatenate([TRUTH, ALPHA]), atol=1e-6)

    def test_noiseless_gamma_ignores_nuisance(self):
        res = fit_gamma_mde(noiseless(scenario="misspecified"), policy_template(), FitConfig("gamma_mde", -1.5))
        np.testing.assert_allclose(res.psi_hat, TRUTH, atol=1e-6)

    @pytest.mark.parametrize("method, index, template", [("gamma_mde", -1.5, policy_template()), ("beta_mde", -1.5, working_model())])
    def test_single_run_within_three_se(self, correct_data, method, index, template):
        res = fit(correct_data, template, FitConfig(method, index))
        assert res.converged
        cov = res.sandwich_covariance
        np.testing.assert_allclose(cov, cov.T, rtol=1e-12, atol=0)
        assert np.all(np.linalg.eigvalsh(cov) >= -1e-12)
        assert np.all(np.abs(res.psi_hat - TRUTH) < 3 * res.standard_errors[:2])

    def test_beta_zero_dispatches_to_ekl(self, correct_data):
        res = fit(correct_data, working_model(), FitConfig("beta_mde", 0.0, restarts=1))
        assert "eKL" in res.note

    def test_sandwich_matches_closed_form_for_mean(self):
        y = np.random.default_rng(1).normal(3.0, 2.0, 400)
        cov, _ = sandwich(lambda t: (y - t[0])[:, None], np.array([y.mean()]))
        assert cov[0, 0] == pytest.approx(np.var(y) / y.size, rel=1e-6)

    def test_unidentified_parameters_flagged(self):
        data = noiseless(xs=(1.0,))
        res = fit_gamma_mde(data, policy_template(), FitConfig("gamma_mde", -1.5, restarts=1))
        assert not res.converged and "singular" in res.message

    def test_config_validation(self):
        with pytest.raises(SingularIndexError):
            FitConfig("gamma_mde", 0.0)
        with pytest.raises(SingularIndexError):
            FitConfig("beta_mde", -1.0)
        with pytest.raises(ValueError):
            FitConfig("lasso")
        with pytest.raises(ValueError):
            FitConfig(optimizer="sgd")

    def test_result_round_trip(self, correct_data, tmp_path):
        res = fit(correct_data, policy_template(), FitConfig("gamma_mde", -1.5, restarts=1))
        res.save(tmp_path / "r.json")
        import json

        back = FitResult.from_dict(json.loads((tmp_path / "r.json").read_text()))
        np.testing.assert_array_equal(back.psi_hat, res.psi_hat)
        np.testing.assert_array_equal(back.sandwich_covariance, res.sandwich_covariance)
        assert back.converged == res.converged and back.note == res.note

    def test_deterministic(self, correct_data):
        cfg = FitConfig("beta_mde", -1.5, seed=3)
        a = fit(correct_data, working_model(), cfg)
        b = fit(correct_data, working_model(), cfg)
        assert a.to_dict() == b.to_dict()

    def test_multi_stage_rejected(self):
        from dtrdiv.simulate import generate_two_stage

        with pytest.raises(StructuralError):
            fit_gamma_mde(generate_two_stage(50, 0), policy_template(), FitConfig())


class TestPropensity:
    def test_intercept_only_matches_frequencies(self):
        a = np.array([1] * 50 + [2] * 25 + [3] * 25)
        data = TrajectoryDataset.single_stage(np.zeros((100, 1)), a, np.ones(100), None, ACTIONS)
        P = fit_propensity(data).probabilities(np.zeros((1, 1)))
        np.testing.assert_allclose(P[0], [0.5, 0.25, 0.25], atol=1e-6)

    def test_randomized_design(self):
        data = generate_correct(ScenarioConfig(n=3000), 5)
        P = fit_propensity(data).probabilities(data.stage(1).x)
        se = math.sqrt((1 / 3) * (2 / 3) / data.n)
        assert np.all(np.abs(P.mean(axis=0) - 1 / 3) < 3 * se)

    def test_separation_clamps_with_warning(self):
        x = np.linspace(-1, 1, 90)
        a = np.where(x > 0.5, 3, np.where(x > 0, 2, 1))
        data = TrajectoryDataset.single_stage(x[:, None], a, np.ones(90), None, ACTIONS)
        model = fit_propensity(data)
        with pytest.warns(RuntimeWarning, match="clamped"):
            P = model.probabilities(x[:, None])
        assert P.min() == pytest.approx(1e-6)

    def test_unobserved_action(self):
        data = TrajectoryDataset.single_stage(np.zeros((4, 1)), [1, 2, 1, 2], np.ones(4), None, ACTIONS)
        with pytest.raises(DegenerateDataError):
            fit_propensity(data)

    def test_fill_missing(self):
        data = generate_correct(ScenarioConfig(n=300), 1)
        stripped = data.replace_stage(1, p=None)
        filled = with_fitted_propensities(stripped)
        assert filled.stage(1).p is not None
        np.testing.assert_allclose(filled.stage(1).p, 1 / 3, atol=0.2)


class TestBackward:
    def test_single_stage_matches_direct_fit(self, correct_data):
        from dtrdiv.models import ModelQFunction, NuisanceComponent

        cfg = FitConfig("gamma_mde", -1.5, restarts=1)
        tmpl = ModelQFunction(NuisanceComponent.linear(np.zeros(2)), policy_template())
        back = fit_backward(correct_data, [tmpl], cfg)
        direct = fit_gamma_mde(correct_data, policy_template(), cfg)
        np.testing.assert_array_equal(back.stage_results[0].psi_hat, direct.psi_hat)

    def test_template_count(self, correct_data):
        with pytest.raises(StructuralError):
            fit_backward(correct_data, [], FitConfig())

    def test_two_stage_agreement(self):
        from dtrdiv.simulate import TwoStageTruth, generate_two_stage, two_stage_templates

        truth = TwoStageTruth()
        res = fit_backward(generate_two_stage(2000, 11), two_stage_templates(), FitConfig("gamma_mde", -1.0, restarts=1))
        held = generate_two_stage(1000, 12)
        H1, H2 = held.history(1), held.history(2)
        assert np.mean(res.policies[0].batch(H1) == truth.oracle_stage1(H1[:, 0])) >= 0.9
        assert np.mean(res.policies[1].batch(H2) == truth.oracle_stage2(H2[:, 2])) >= 0.9

    def test_no_second_stage_effect_matches_summed_outcome(self):
        from dtrdiv.simulate import TwoStageTruth, generate_two_stage, two_stage_templates

        truth = TwoStageTruth(psi2=(0.0, 0.0), f2=(0.0, 0.0))
        data = generate_two_stage(3000, 21, truth)
        cfg = FitConfig("gamma_mde", -1.5, restarts=1)
        back = fit_backward(data, two_stage_templates(), cfg).stage_results[0]
        s1, s2 = data.stage(1), data.stage(2)
        summed = TrajectoryDataset((StageData(s1.x, s1.a, s1.y + s2.y, s1.p),), data.actions)
        single = fit_gamma_mde(summed, policy_template(), cfg)
        se = np.sqrt(back.standard_errors**2 + single.standard_errors**2)
        assert np.all(np.abs(back.psi_hat - single.psi_hat) < 3 * se)

    def test_to_dict(self):
        from dtrdiv.simulate import generate_two_stage, two_stage_templates

        res = fit_backward(generate_two_stage(300, 3), two_stage_templates(), FitConfig("gamma_mde", -1.5, restarts=0))
        out = res.to_dict()
        assert out["T"] == 2 and out["stages"][0]["plugin_fit"] is None
        assert out["stages"][1]["plugin_fit"]["method"] == "ml"
