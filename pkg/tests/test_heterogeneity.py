import logging

import numpy as np
import pytest

from app.core.errors import InvalidArgument, NeedsTwoEstimators
from app.core.panel import Tau2Method, eb_combine, marginal_loglik
from app.services.dgp import MetaConfig, gen_meta_panel
from app.services.heterogeneity import (
    _bisect_decreasing,
    estimate_tau2,
    fit_panel,
    mmle_score,
    pairwise_raw,
    tau2_mmle,
    tau2_pairwise,
    tau2_paule_mandel,
)

ESTIMATORS = [tau2_pairwise, tau2_mmle, tau2_paule_mandel]


def _meta_draws(reps, **overrides):
    base = dict(J=50, tau2=1.0, v=0.01, with_influence=False)
    base.update(overrides)
    return [gen_meta_panel(MetaConfig(seed=seed, **base)).panel for seed in range(reps)]


class TestPairwise:
    def test_single_pair(self, panel_factory):
        result = tau2_pairwise(panel_factory([0.0, 2.0], [1.0, 1.0]))
        assert result.tau2 == pytest.approx(1.0)
        assert result.boundary is False

    def test_truncation(self, panel_factory):
        result = tau2_pairwise(panel_factory([5.0, 5.0], [1.0, 1.0]))
        assert result.tau2 == 0.0
        assert result.boundary is True
        assert result.raw == pytest.approx(-1.0)

    def test_three_pairs_enumerated(self, panel_factory):
        panel = panel_factory([0.0, 1.0, 2.0], [1.0, 1.0, 1.0])
        assert pairwise_raw(panel) == pytest.approx(0.0, abs=1e-12)
        assert tau2_pairwise(panel).tau2 == 0.0

    def test_matches_explicit_pair_average(self, panel_factory):
        rng = np.random.default_rng(8)
        est, var = rng.normal(size=9), rng.uniform(0.1, 0.5, size=9)
        pairs = [((est[j] - est[k]) ** 2 - (var[j] + var[k])) for j in range(9) for k in range(j + 1, 9)]
        assert pairwise_raw(panel_factory(est, var)) == pytest.approx(np.mean(pairs) / 2)

    def test_needs_two(self, panel_factory):
        with pytest.raises(NeedsTwoEstimators):
            tau2_pairwise(panel_factory([1.0], [1.0]))


class TestMmle:
    def test_identical_estimates_hit_boundary(self, panel_factory):
        result = tau2_mmle(panel_factory([3.0] * 4, [0.5, 1.0, 1.5, 2.0]))
        assert result.tau2 == 0.0
        assert result.boundary is True

    def test_two_estimators_grid_oracle(self, panel_factory):
        # psi_hat = (0, 2), v = (1, 1): the profiled score is -2 t / (1 + t)^2 <= 0,
        # so the constrained maximizer of the profile likelihood is the boundary.
        panel = panel_factory([0.0, 2.0], [1.0, 1.0])
        grid = np.linspace(0.0, 10.0, 201)
        scores = np.array([mmle_score(panel, t) for t in grid])
        assert np.all(scores <= 1e-12)
        profile = [marginal_loglik(panel, eb_combine(panel, t).psi_eb, t) for t in grid]
        assert int(np.argmax(profile)) == 0
        result = tau2_mmle(panel)
        assert result.tau2 == 0.0
        assert result.boundary is True

    def test_interior_root(self, panel_factory):
        # symmetric panel: score proportional to (5 - 3 t)
        result = tau2_mmle(panel_factory([0.0, 2.0, 4.0], [1.0, 1.0, 1.0]))
        assert result.tau2 == pytest.approx(5 / 3, abs=1e-8)
        assert result.boundary is False
        assert abs(result.residual) <= 1e-10

    def test_rejects_bad_tolerance(self, panel_factory):
        with pytest.raises(InvalidArgument):
            tau2_mmle(panel_factory([0.0, 1.0], [1.0, 1.0]), tol=0.0)


class TestPauleMandel:
    def test_identical_estimates_hit_boundary(self, panel_factory):
        result = tau2_paule_mandel(panel_factory([1.0, 1.0, 1.0], [0.1, 0.2, 0.3]))
        assert result.tau2 == 0.0
        assert result.boundary is True

    def test_symmetric_panel(self, panel_factory):
        result = tau2_paule_mandel(panel_factory([0.0, 2.0, 4.0], [1.0, 1.0, 1.0]))
        assert result.tau2 == pytest.approx(3.0, abs=1e-8)
        assert abs(result.residual) <= 1e-10


class TestProperties:
    @pytest.fixture
    def heterogeneous(self, panel_factory):
        rng = np.random.default_rng(21)
        return rng.normal(size=20), rng.uniform(0.05, 0.2, size=20)

    @pytest.mark.parametrize("estimator", ESTIMATORS)
    def test_identical_estimates_give_zero(self, panel_factory, estimator):
        assert estimator(panel_factory([0.7] * 6, np.linspace(0.1, 0.6, 6))).tau2 == 0.0

    @pytest.mark.parametrize("estimator", ESTIMATORS)
    def test_scale_equivariance(self, panel_factory, heterogeneous, estimator):
        est, var = heterogeneous
        c = 3.0
        base = estimator(panel_factory(est, var)).tau2
        scaled = estimator(panel_factory(c * est, c**2 * var)).tau2
        assert base > 0
        assert scaled == pytest.approx(c**2 * base, rel=1e-8)

    @pytest.mark.parametrize("estimator", ESTIMATORS)
    def test_shift_invariance(self, panel_factory, heterogeneous, estimator):
        est, var = heterogeneous
        base = estimator(panel_factory(est, var)).tau2
        shifted = estimator(panel_factory(est + 17.5, var)).tau2
        assert shifted == pytest.approx(base, rel=1e-8)

    @pytest.mark.parametrize("estimator", [tau2_mmle, tau2_paule_mandel])
    def test_working_model_recovery(self, estimator):
        values = np.array([estimator(p).tau2 for p in _meta_draws(20, J=200, tau2=0.5)])
        assert np.all((values > 0.3) & (values < 0.7))
        assert abs(values.mean() - 0.5) < 0.05

    def test_pairwise_unbiased_without_correlation(self):
        raws = np.array([pairwise_raw(p) for p in _meta_draws(2000, v=0.05, v_hi=0.2, rho=0.0)])
        se = raws.std(ddof=1) / np.sqrt(raws.size)
        assert abs(raws.mean() - 1.0) < 4 * se

    def test_pairwise_attenuated_by_shared_noise(self):
        correlated = np.array([pairwise_raw(p) for p in _meta_draws(2000, rho=0.5)])
        independent = np.array([pairwise_raw(p) for p in _meta_draws(2000, rho=0.0)])
        se = correlated.std(ddof=1) / np.sqrt(correlated.size)
        assert abs(correlated.mean() - (1.0 - 0.5 * 0.01)) < 4 * se
        # Same seeds share the latent draws, so the paired difference isolates
        # the shared-noise term and its expectation is -rho * v.
        shift = correlated - independent
        shift_se = shift.std(ddof=1) / np.sqrt(shift.size)
        assert abs(shift.mean() + 0.5 * 0.01) < 4 * shift_se
        # independent noise leaves the pairwise value unbiased for tau2 = 1
        assert 1.0 + shift.mean() + 3 * shift_se < 1.0


class TestDispatch:
    def test_fixed_requires_value(self, panel_factory):
        with pytest.raises(InvalidArgument):
            estimate_tau2(panel_factory([0.0, 1.0], [1.0, 1.0]), Tau2Method.FIXED)

    def test_fixed_passes_through(self, panel_factory):
        result = estimate_tau2(panel_factory([0.0, 1.0], [1.0, 1.0]), "fixed", tau2=0.4)
        assert result.tau2 == 0.4
        assert result.method is Tau2Method.FIXED

    def test_fit_panel_pools_at_estimate(self, panel_factory):
        panel = panel_factory([0.0, 2.0, 4.0], [1.0, 1.0, 1.0])
        fit, result = fit_panel(panel, Tau2Method.PAULE_MANDEL)
        assert fit.tau2 == result.tau2
        assert fit.psi_eb == pytest.approx(2.0)

    def test_single_functional_pools_trivially(self, panel_factory):
        fit, result = fit_panel(panel_factory([1.25], [0.3]), Tau2Method.MMLE_SCORE)
        assert fit.psi_eb == 1.25
        assert result.boundary is True


class TestSolver:
    def test_collapsed_bracket_is_reported(self, caplog):
        def step(t):
            return 1.0 if t < 0.5 else -1.0

        with caplog.at_level(logging.WARNING, logger="app.services.heterogeneity"):
            root, iterations, residual = _bisect_decreasing(step, 1.0, 1e-10, 500, "step")
        assert root == pytest.approx(0.5, abs=1e-12)
        assert abs(residual) == 1.0
        assert iterations < 500
        assert "bracket collapsed" in caplog.text

    def test_converged_root_is_quiet(self, caplog):
        with caplog.at_level(logging.WARNING, logger="app.services.heterogeneity"):
            root, _, residual = _bisect_decreasing(lambda t: 1.0 - t, 4.0, 1e-10, 500, "line")
        assert root == pytest.approx(1.0, abs=1e-9)
        assert abs(residual) <= 1e-10
        assert caplog.text == ""
