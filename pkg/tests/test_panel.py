import logging

import numpy as np
import pytest

from app.core.errors import EmptyPanel, InvalidArgument, NegativeTau2, NonPositiveVariance
from app.core.panel import (
    EstimatorPanel,
    Tau2Method,
    eb_combine,
    marginal_loglik,
    max_weight,
    orthogonality_gap,
    precision_weights,
)


class TestPrecisionWeights:
    def test_equal_variances_split_evenly(self):
        np.testing.assert_allclose(precision_weights([1.0, 1.0], 0.0), [0.5, 0.5])

    def test_unequal_variances(self):
        np.testing.assert_allclose(precision_weights([1.0, 3.0], 1.0), [2 / 3, 1 / 3], atol=1e-12)

    def test_large_tau2_washes_out_variances(self):
        weights = precision_weights([0.1, 10.0], 1000.0)
        assert np.all(np.abs(weights - 0.5) < 0.005)

    def test_washout_to_uniform(self):
        v = np.geomspace(0.01, 10.0, 7)
        weights = precision_weights(v, 1e9)
        assert np.max(np.abs(weights - 1 / 7)) < 1e-6

    @pytest.mark.parametrize(
        "variances, tau2, error",
        [([], 0.0, EmptyPanel), ([1.0, 0.0], 0.0, NonPositiveVariance), ([1.0], -0.1, NegativeTau2)],
    )
    def test_errors(self, variances, tau2, error):
        with pytest.raises(error):
            precision_weights(variances, tau2)


class TestEbCombine:
    def test_single_estimator(self, panel_factory):
        fit = eb_combine(panel_factory([7.3], [0.4]), 2.5)
        assert fit.psi_eb == pytest.approx(7.3)
        assert fit.weights.tolist() == [1.0]

    def test_equal_weights(self, panel_factory):
        assert eb_combine(panel_factory([1.0, 3.0], [1.0, 1.0]), 0.0).psi_eb == pytest.approx(2.0)

    def test_precision_weighted(self, panel_factory):
        fit = eb_combine(panel_factory([1.0, 3.0], [1.0, 3.0]), 1.0, Tau2Method.FIXED)
        assert fit.psi_eb == pytest.approx(5 / 3)
        assert fit.tau2_method is Tau2Method.FIXED

    def test_fit_invariants(self, panel_factory):
        rng = np.random.default_rng(3)
        panel = panel_factory(rng.normal(size=15), rng.uniform(0.1, 2.0, size=15))
        for tau2 in (0.0, 0.3, 10.0):
            fit = eb_combine(panel, tau2)
            assert np.all(fit.weights >= 0)
            assert fit.weights.sum() == pytest.approx(1.0, abs=1e-12)
            assert fit.psi_eb == np.dot(fit.weights, panel.estimates)
            assert panel.estimates.min() <= fit.psi_eb <= panel.estimates.max()

    def test_agreeing_estimates_ignore_tau2(self, panel_factory):
        panel = panel_factory([4.2] * 5, [0.1, 0.5, 1.0, 2.0, 3.0])
        for tau2 in (0.0, 1.0, 1e6):
            assert eb_combine(panel, tau2).psi_eb == pytest.approx(4.2)

    def test_permutation_equivariance(self, panel_factory):
        est, var = np.array([0.5, 1.5, -0.2, 0.9]), np.array([0.2, 1.0, 0.4, 0.7])
        order = [2, 0, 3, 1]
        fit = eb_combine(panel_factory(est, var), 0.3)
        permuted = eb_combine(panel_factory(est[order], var[order]), 0.3)
        np.testing.assert_allclose(permuted.weights, fit.weights[order])
        assert permuted.psi_eb == pytest.approx(fit.psi_eb)

    def test_maximizes_marginal_likelihood_in_psi(self, panel_factory):
        panel = panel_factory([0.1, 0.9, 0.4], [0.2, 0.5, 0.1])
        fit = eb_combine(panel, 0.25)
        best = marginal_loglik(panel, fit.psi_eb, 0.25)
        for shift in (-0.05, 0.05):
            assert marginal_loglik(panel, fit.psi_eb + shift, 0.25) < best


class TestDiagnostics:
    def test_max_weight_even(self, panel_factory):
        assert max_weight(eb_combine(panel_factory([1.0, 2.0], [1.0, 1.0]), 0.0)) == pytest.approx(0.5)

    def test_max_weight_uniform(self, panel_factory):
        fit = eb_combine(panel_factory(np.arange(6.0), np.full(6, 0.3)), 0.0)
        assert max_weight(fit) == pytest.approx(1 / 6)

    def test_max_weight_dominant(self, panel_factory):
        fit = eb_combine(panel_factory([0.0, 1.0], [0.1, 10.0]), 0.0)
        assert max_weight(fit) == pytest.approx(100 / 101)

    @pytest.mark.parametrize(
        "estimates, variances, expected",
        [([2.0, 2.0], [1.0, 3.0], 0.0), ([1.0, 3.0], [1.0, 1.0], 0.0), ([1.0, 3.0], [1.0, 3.0], 8 / 9)],
    )
    def test_orthogonality_gap(self, panel_factory, estimates, variances, expected):
        assert orthogonality_gap(panel_factory(estimates, variances), 2.0, 0.0) == pytest.approx(expected, abs=1e-12)


class TestEstimatorPanel:
    def test_rejects_zero_variance(self, panel_factory):
        with pytest.raises(NonPositiveVariance):
            panel_factory([1.0, 2.0], [0.5, 0.0])

    def test_rejects_length_mismatch(self):
        with pytest.raises(InvalidArgument):
            EstimatorPanel(estimates=[1.0, 2.0], variances=[1.0], labels=["a", "b"])

    def test_rejects_empty(self):
        with pytest.raises(EmptyPanel):
            EstimatorPanel(estimates=[], variances=[], labels=[])

    def test_influence_shape_checked(self, panel_factory):
        with pytest.raises(InvalidArgument):
            panel_factory([1.0, 2.0], [1.0, 1.0], influence=np.zeros((10, 3)))

    def test_arrays_are_read_only(self, panel_factory):
        panel = panel_factory([1.0, 2.0], [1.0, 1.0])
        with pytest.raises(ValueError):
            panel.estimates[0] = 5.0

    def test_uncentered_influence_warns(self, panel_factory, caplog):
        with caplog.at_level(logging.WARNING, logger="app.core.panel"):
            panel_factory([1.0], [1.0], influence=np.ones((50, 1)))
        assert "not centered" in caplog.text

    def test_json_round_trip(self, panel_factory, tmp_path):
        rng = np.random.default_rng(0)
        influence = rng.normal(size=(40, 3))
        influence -= influence.mean(axis=0)
        panel = panel_factory([0.1, 0.2, 0.3], influence.var(axis=0) / 40, influence=influence)
        path = tmp_path / "panel.json"
        panel.to_json(path)
        restored = EstimatorPanel.from_json(path)
        np.testing.assert_array_equal(restored.estimates, panel.estimates)
        np.testing.assert_array_equal(restored.influence, panel.influence)
        assert restored.n == 40
        assert EstimatorPanel.from_json(panel.to_json()).labels == panel.labels

    def test_from_csv(self, tmp_path):
        path = tmp_path / "panel.csv"
        path.write_text("label,estimate,variance\nrct,1.2,0.16\n\"S{1,2}\",1.5,0.02\n")
        panel = EstimatorPanel.from_csv(path)
        assert panel.labels == ("rct", "S{1,2}")
        assert panel.J == 2
        assert panel.n is None

    def test_subset_keeps_influence_columns(self, panel_factory):
        influence = np.array([[1.0, -2.0, 0.5], [-1.0, 2.0, -0.5]])
        panel = panel_factory([1.0, 2.0, 3.0], [1.0, 4.0, 0.25], influence=influence)
        sub = panel.subset([2, 0])
        assert sub.labels == ("f3", "f1")
        np.testing.assert_array_equal(sub.influence, influence[:, [2, 0]])
