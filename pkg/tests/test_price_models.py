import json
import math

import numpy as np
import pytest

from imbtrader.market_impact import ImpactParams, Regime
from imbtrader.price_models import (
    DegenerateLabelsError,
    LogisticModel,
    QuantileModelBank,
    ReserveGrid,
    SoftmaxPriceModel,
    augment_with_positions,
    expected_reserve_price,
    fit_logistic,
    fit_quantile_bank,
    forecast,
    logistic_loss_and_grad,
    pinball_loss,
    predict_regulation_distribution,
    quantile_levels,
    quantile_loss_and_grad,
    quantile_matrix,
    sigmoid_predict,
    softmax_weights,
)


def bare_logistic(bias, weights, position_index=None):
    return LogisticModel(
        bias=bias, weights=np.asarray(weights, float), scaler=None,
        position_weight_index=position_index,
    )


class TestSigmoidPredict:
    def test_zero_score_is_half(self):
        model = bare_logistic(0.0, [0.0, 0.0])
        assert sigmoid_predict(model, [3.0, -1.0]) == 0.5

    def test_direct_evaluation(self):
        model = bare_logistic(0.0, [1.0])
        assert sigmoid_predict(model, [math.log(3.0)]) == pytest.approx(0.75)

    def test_saturation_without_overflow(self):
        model = bare_logistic(0.0, [1.0])
        p = sigmoid_predict(model, [1e6])
        assert 1.0 - 1e-12 < p < 1.0
        p_lo = sigmoid_predict(model, [-1e6])
        assert 0.0 < p_lo < 1e-12

    def test_dimension_mismatch(self):
        model = bare_logistic(0.0, [1.0, 2.0])
        with pytest.raises(ValueError):
            sigmoid_predict(model, [1.0])

    def test_strictly_inside_unit_interval_and_monotone(self):
        rng = np.random.default_rng(0)
        model = bare_logistic(float(rng.normal()), rng.normal(size=3))
        scores = []
        for t in np.linspace(-50, 50, 21):
            x = t * model.weights  # moves along the weight direction
            p = sigmoid_predict(model, x)
            assert 0.0 < p < 1.0
            scores.append(p)
        assert all(a <= b for a, b in zip(scores, scores[1:]))


class TestFitLogistic:
    def test_separable_data_fits_tightly(self):
        # sign-separable with a margin, so finite iterations reach high confidence
        rng = np.random.default_rng(1)
        x = (np.sign(rng.normal(size=200)) * (0.25 + np.abs(rng.normal(size=200))))[:, None]
        y = (x[:, 0] > 0).astype(float)
        model = fit_logistic(x, y, l2=1e-10)
        p = model.predict(x)
        assert np.all(np.where(y == 1, p, 1 - p) >= 0.95)

    def test_uninformative_features_reproduce_base_rate(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(4000, 3))
        y = (rng.random(4000) < 0.7).astype(float)
        model = fit_logistic(x, y)
        assert np.mean(model.predict(x)) == pytest.approx(y.mean(), abs=0.01)

    def test_intercept_only_even_labels(self):
        x = np.zeros((10, 0))
        y = np.array([0.0, 1.0] * 5)
        model = fit_logistic(x, y)
        assert model.predict(np.zeros((1, 0)))[0] == pytest.approx(0.5, abs=1e-6)

    def test_single_label_rejected(self):
        with pytest.raises(DegenerateLabelsError):
            fit_logistic(np.zeros((4, 1)), np.ones(4))

    def test_intercept_only_matches_base_rate(self):
        rng = np.random.default_rng(3)
        y = (rng.random(2000) < 0.31).astype(float)
        model = fit_logistic(np.zeros((2000, 0)), y)
        assert model.predict(np.zeros((1, 0)))[0] == pytest.approx(y.mean(), abs=0.01)


class TestGradients:
    def central_difference(self, fun, params, h=1e-5):
        grad = np.empty_like(params)
        for i in range(params.size):
            up = params.copy()
            dn = params.copy()
            up[i] += h
            dn[i] -= h
            grad[i] = (fun(up) - fun(dn)) / (2.0 * h)
        return grad

    def test_logistic_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(40, 3))
        y = (rng.random(40) < 0.5).astype(float)
        for _ in range(20):
            params = rng.normal(size=4)
            val, grad = logistic_loss_and_grad(params, x, y, l2=1e-4)
            fd = self.central_difference(lambda p: logistic_loss_and_grad(p, x, y, 1e-4)[0], params)
            assert np.linalg.norm(grad - fd) <= 1e-4 * max(np.linalg.norm(fd), 1e-8)

    def test_quantile_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        n, d, k = 30, 2, 4
        z = rng.normal(size=(n, d))
        o = rng.normal(scale=50.0, size=(n, k))
        y = rng.normal(scale=50.0, size=n)
        for _ in range(20):
            tau = float(rng.uniform(0.05, 0.95))
            params = rng.normal(size=k * d + k)
            val, grad = quantile_loss_and_grad(params, z, o, y, tau, k)
            fd = self.central_difference(
                lambda p: quantile_loss_and_grad(p, z, o, y, tau, k)[0], params
            )
            assert np.linalg.norm(grad - fd) <= 1e-4 * max(np.linalg.norm(fd), 1e-8)


class TestAugmentWithPositions:
    def test_zero_beta_labels_ignore_positions(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(50, 2))
        s = rng.normal(size=50)
        x_aug, labels, _ = augment_with_positions(x, s, u_max=5.0, beta=0.0, rng=0)
        assert np.array_equal(labels, s > 0)
        assert np.all(x_aug[:, -1] == 0.0)  # zero imbalance shift appended

    def test_labels_follow_shifted_sign_rule(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(200, 1))
        s = rng.normal(scale=3.0, size=200)
        x_aug, labels, u = augment_with_positions(x, s, u_max=5.0, beta=0.8, rng=11)
        assert np.array_equal(labels, s > -0.8 * u)
        assert np.allclose(x_aug[:, -1], 0.8 * u)
        assert np.all((u >= 0.0) & (u <= 5.0))

    def test_known_thresholds(self):
        # s = -3 with an imbalance shift of 5 stays positive; shift 2 does not.
        x = np.zeros((2, 1))
        s = np.array([-3.0, -3.0])
        x_aug, labels, u = augment_with_positions(x, s, u_max=1.0, beta=1.0, rng=0)
        by_hand = s > -1.0 * u
        assert np.array_equal(labels, by_hand)
        assert (-3.0 > -5.0) and not (-3.0 > -2.0)  # the rule the rows follow

    def test_deterministic_under_seed(self):
        x = np.zeros((20, 1))
        s = np.linspace(-2, 2, 20)
        a = augment_with_positions(x, s, u_max=5.0, beta=1.0, rng=42)
        b = augment_with_positions(x, s, u_max=5.0, beta=1.0, rng=42)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_invalid_u_max(self):
        with pytest.raises(ValueError):
            augment_with_positions(np.zeros((2, 1)), np.zeros(2), u_max=0.0, beta=1.0, rng=0)

    def test_signed_range_for_short_training(self):
        x = np.zeros((500, 1))
        s = np.zeros(500)
        _, _, u = augment_with_positions(x, s, u_max=5.0, beta=1.0, rng=1, u_min=-5.0)
        assert u.min() < -2.0 and u.max() > 2.0


class TestSoftmaxWeights:
    def test_equal_logits_uniform(self):
        model = SoftmaxPriceModel(np.zeros((4, 2)), np.zeros(4))
        w = softmax_weights(model, [1.0, -1.0])
        assert np.allclose(w, 0.25)
        assert abs(w.sum() - 1.0) <= 1e-12

    def test_dominant_logit_saturates(self):
        model = SoftmaxPriceModel(np.zeros((3, 1)), np.array([50.0, 0.0, 0.0]))
        w = softmax_weights(model, [0.0])
        assert w[0] >= 1.0 - 1e-15

    def test_direct_two_way_softmax(self):
        model = SoftmaxPriceModel(np.zeros((2, 1)), np.array([0.0, math.log(3.0)]))
        w = softmax_weights(model, [0.0])
        assert w[0] == pytest.approx(0.25)
        assert w[1] == pytest.approx(0.75)

    def test_shift_invariance(self):
        rng = np.random.default_rng(8)
        logits = rng.normal(size=5)
        m1 = SoftmaxPriceModel(np.zeros((5, 1)), logits)
        m2 = SoftmaxPriceModel(np.zeros((5, 1)), logits + 123.456)
        assert np.allclose(softmax_weights(m1, [0.0]), softmax_weights(m2, [0.0]), atol=1e-12)

    def test_dimension_mismatch(self):
        model = SoftmaxPriceModel(np.zeros((2, 2)), np.zeros(2))
        with pytest.raises(ValueError):
            softmax_weights(model, [1.0])


class TestExpectedReservePrice:
    def test_one_hot_selects_entry(self):
        model = SoftmaxPriceModel(np.zeros((3, 1)), np.array([80.0, 0.0, 0.0]))
        assert expected_reserve_price(model, [0.0], [10.0, 20.0, 30.0]) == pytest.approx(10.0)

    def test_uniform_average(self):
        model = SoftmaxPriceModel(np.zeros((2, 1)), np.zeros(2))
        assert expected_reserve_price(model, [0.0], [10.0, 20.0]) == pytest.approx(15.0)

    def test_constant_ladder_is_identity(self):
        rng = np.random.default_rng(9)
        model = SoftmaxPriceModel(rng.normal(size=(4, 2)), rng.normal(size=4))
        assert expected_reserve_price(model, [0.3, -0.7], [42.0] * 4) == pytest.approx(42.0)

    def test_within_ladder_range(self):
        rng = np.random.default_rng(10)
        for _ in range(20):
            model = SoftmaxPriceModel(rng.normal(size=(5, 2)), rng.normal(size=5))
            o = rng.normal(scale=100.0, size=5)
            got = expected_reserve_price(model, rng.normal(size=2), o)
            assert o.min() - 1e-9 <= got <= o.max() + 1e-9


class TestPinballLoss:
    def test_zero_residual(self):
        assert pinball_loss(0.9, 0.0) == 0.0

    def test_positive_residual(self):
        assert pinball_loss(0.9, 1.0) == pytest.approx(0.9)

    def test_negative_residual(self):
        assert pinball_loss(0.9, -1.0) == pytest.approx(0.1)

    def test_nonnegative(self):
        rng = np.random.default_rng(11)
        e = rng.normal(size=100)
        assert np.all(pinball_loss(0.3, e) >= 0.0)

    def test_tau_validated(self):
        with pytest.raises(ValueError):
            pinball_loss(1.2, 0.0)


class TestQuantileBank:
    def test_levels_are_midpoints(self):
        taus = quantile_levels(4)
        assert taus.tolist() == [0.125, 0.375, 0.625, 0.875]

    def test_planted_one_hot_recovery(self):
        rng = np.random.default_rng(12)
        n = 400
        z = rng.uniform(-1.0, 1.0, size=(n, 1))
        planted = 100.0 + 60.0 * z[:, 0]
        o = np.column_stack([planted + 70.0, planted, planted - 55.0, planted + 120.0])
        bank = fit_quantile_bank(z, o, planted, regime=Regime.MDP, n_q=4, max_iter=600)
        preds = quantile_matrix(bank, z, o)
        losses = [
            np.mean(pinball_loss(tau, planted - preds[:, i]))
            for i, tau in enumerate(bank.taus)
        ]
        assert max(losses) <= 1e-3

    def test_constant_target_collapses(self):
        n = 60
        z = np.linspace(-1, 1, n)[:, None]
        o = np.full((n, 3), 25.0)
        bank = fit_quantile_bank(z, o, np.full(n, 25.0), regime=Regime.MIP, n_q=3)
        dist = predict_regulation_distribution(bank, [0.2], [25.0, 25.0, 25.0])
        assert dist.n_atoms == 1
        assert dist.values[0] == pytest.approx(25.0)

    def test_heteroskedastic_quantiles(self):
        rng = np.random.default_rng(13)
        n = 4000
        z = rng.uniform(0.5, 1.5, size=n)
        y = z * rng.normal(1.0, 0.15, size=n)
        o = np.tile([0.0, 3.0], (n, 1))
        bank = fit_quantile_bank(z[:, None], o, y, regime=Regime.MIP, n_q=5, max_iter=800)
        preds = quantile_matrix(bank, z[:, None], o)
        probe = np.array([0.6, 1.0, 1.4])
        probe_preds = quantile_matrix(bank, probe[:, None], np.tile([0.0, 3.0], (3, 1)))
        from math import erf, sqrt

        def normal_quantile(tau):
            # bisect the standard normal CDF; enough accuracy for a 5% check
            lo, hi = -5.0, 5.0
            for _ in range(80):
                mid = 0.5 * (lo + hi)
                if 0.5 * (1.0 + erf(mid / sqrt(2.0))) < tau:
                    lo = mid
                else:
                    hi = mid
            return 0.5 * (lo + hi)

        for i, tau in enumerate([0.1, 0.5, 0.9]):
            idx = list(bank.taus).index(tau)
            analytic = probe * (1.0 + 0.15 * normal_quantile(tau))
            assert np.all(np.abs(probe_preds[:, idx] - analytic) <= 0.05 * np.abs(analytic))

    def test_empty_regime_rejected(self):
        with pytest.raises(ValueError):
            fit_quantile_bank(np.zeros((0, 1)), np.zeros((0, 2)), np.zeros(0), regime=Regime.MDP, n_q=2)


class TestPredictRegulationDistribution:
    def test_two_quantiles_half_mass_each(self):
        weights = np.zeros((2, 2, 1))
        biases = np.array([[200.0, 0.0], [0.0, 200.0]])
        bank = QuantileModelBank(
            regime=Regime.MDP, taus=quantile_levels(2), weights=weights, biases=biases, scaler=None
        )
        dist = predict_regulation_distribution(bank, [0.0], [10.0, 30.0])
        assert dist.values.tolist() == [10.0, 30.0]
        assert dist.masses.tolist() == [0.5, 0.5]

    def test_unordered_quantiles_reordered(self):
        weights = np.zeros((2, 2, 1))
        biases = np.array([[0.0, 200.0], [200.0, 0.0]])  # first level picks the larger price
        bank = QuantileModelBank(
            regime=Regime.MDP, taus=quantile_levels(2), weights=weights, biases=biases, scaler=None
        )
        dist = predict_regulation_distribution(bank, [0.0], [10.0, 30.0])
        assert np.all(np.diff(dist.values) > 0)

    def test_expectation_is_mean_of_quantiles(self):
        rng = np.random.default_rng(14)
        bank = QuantileModelBank(
            regime=Regime.MIP,
            taus=quantile_levels(8),
            weights=rng.normal(size=(8, 3, 2)),
            biases=rng.normal(size=(8, 3)),
            scaler=None,
        )
        z, o = rng.normal(size=2), rng.normal(scale=40.0, size=3)
        dist = predict_regulation_distribution(bank, z, o)
        raw = quantile_matrix(bank, z[None, :], o[None, :])[0]
        assert dist.mean() == pytest.approx(raw.mean())


class TestForecast:
    def setup_method(self):
        rng = np.random.default_rng(15)
        self.weight_model = LogisticModel(
            bias=0.1,
            weights=np.array([0.5, -0.2, 0.03]),
            scaler=None,
            position_weight_index=2,
        )
        self.bank_down = QuantileModelBank(
            regime=Regime.MDP,
            taus=quantile_levels(4),
            weights=rng.normal(size=(4, 2, 1)),
            biases=rng.normal(size=(4, 2)),
            scaler=None,
        )
        self.bank_up = QuantileModelBank(
            regime=Regime.MIP,
            taus=quantile_levels(4),
            weights=rng.normal(size=(4, 2, 1)),
            biases=rng.normal(size=(4, 2)),
            scaler=None,
        )
        self.x = np.array([0.3, -1.0])
        self.z = np.array([0.4])
        self.o = np.array([20.0, 180.0])

    def test_zero_position_matches_unadjusted(self):
        impact = ImpactParams(beta=1.0, k_mdp=0.4, k_mip=0.41)
        f = forecast(self.weight_model, self.bank_down, self.bank_up, self.x, self.z, self.o, 0.0, impact)
        down0 = predict_regulation_distribution(self.bank_down, self.z, self.o)
        up0 = predict_regulation_distribution(self.bank_up, self.z, self.o)
        assert f.down == down0
        assert f.up == up0
        assert f.pi == sigmoid_predict(self.weight_model, np.append(self.x, 0.0))

    def test_position_shifts_up_regime_quantiles(self):
        impact = ImpactParams(beta=1.0, k_mdp=0.4, k_mip=0.41)
        f0 = forecast(self.weight_model, self.bank_down, self.bank_up, self.x, self.z, self.o, 0.0, impact)
        f5 = forecast(self.weight_model, self.bank_down, self.bank_up, self.x, self.z, self.o, 5.0, impact)
        assert np.allclose(f5.up.values, f0.up.values - 2.05)
        assert np.allclose(f5.down.values, f0.down.values - 2.0)

    def test_beta_zero_changes_nothing_with_u(self):
        impact = ImpactParams(beta=0.0, k_mdp=0.4, k_mip=0.41)
        f0 = forecast(self.weight_model, self.bank_down, self.bank_up, self.x, self.z, self.o, 0.0, impact)
        f5 = forecast(self.weight_model, self.bank_down, self.bank_up, self.x, self.z, self.o, 5.0, impact)
        assert f5.pi == f0.pi
        assert f5.down == f0.down and f5.up == f0.up

    def test_pi_monotone_in_u_with_weight_sign(self):
        impact = ImpactParams(beta=1.0, k_mdp=0.4, k_mip=0.41)
        pis = [
            forecast(self.weight_model, self.bank_down, self.bank_up, self.x, self.z, self.o, u, impact).pi
            for u in np.linspace(-5, 5, 11)
        ]
        assert all(a <= b for a, b in zip(pis, pis[1:]))  # w_u = 0.03 > 0

    def test_requires_position_feature(self):
        impact = ImpactParams(beta=1.0, k_mdp=0.4, k_mip=0.41)
        plain = LogisticModel(bias=0.0, weights=np.zeros(2), scaler=None)
        with pytest.raises(ValueError):
            forecast(plain, self.bank_down, self.bank_up, self.x, self.z, self.o, 1.0, impact)


class TestSerialization:
    def test_logistic_round_trip(self):
        rng = np.random.default_rng(16)
        x = rng.normal(size=(100, 3))
        y = (x @ np.array([1.0, -2.0, 0.5]) + rng.normal(size=100) > 0).astype(float)
        model = fit_logistic(x, y, position_weight_index=2)
        restored = LogisticModel.from_dict(json.loads(json.dumps(model.to_dict())))
        assert np.array_equal(restored.predict(x), model.predict(x))
        assert restored.position_weight == model.position_weight

    def test_bank_round_trip(self):
        rng = np.random.default_rng(17)
        z = rng.normal(size=(50, 1))
        o = rng.normal(scale=30.0, size=(50, 3)) + 100.0
        y = o[:, 1] + rng.normal(scale=5.0, size=50)
        bank = fit_quantile_bank(z, o, y, regime=Regime.MIP, n_q=3, max_iter=100)
        restored = QuantileModelBank.from_dict(json.loads(json.dumps(bank.to_dict())))
        assert restored.regime is Regime.MIP
        probe_z, probe_o = [0.1], [90.0, 100.0, 140.0]
        assert predict_regulation_distribution(restored, probe_z, probe_o) == \
            predict_regulation_distribution(bank, probe_z, probe_o)

    def test_reserve_grid_round_trip_and_validation(self):
        grid = ReserveGrid((1.0, 50.0, 100.0), (1.0, 100.0, 700.0))
        assert ReserveGrid.from_dict(grid.to_dict()) == grid
        assert grid.size == 6
        assert grid.column_labels()[0] == "afrr_1"
        with pytest.raises(ValueError):
            ReserveGrid((50.0, 1.0), (1.0,))
