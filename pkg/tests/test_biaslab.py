import numpy as np
import pytest

from bcopt import biaslab
from bcopt.biaslab import (
    BiasExperiment,
    BiasPoint,
    BoundParams,
    Gamma,
    LogNormal,
    PointMass,
    TwoPoint,
    contraction_coefficient,
    eigenbasis_residual_experiment,
    fit_loglog_slope,
    jackknife_residual_experiment,
    mc_coupling_covariance,
    mc_inverse_bias,
    measure_update_noise,
    pl_trajectory_bound,
    run_preconditioned_sgd,
    stationarity_bound,
    two_point_inverse_bias,
)
from bcopt.errors import (
    ConfigurationError,
    InsufficientSignalError,
    PreconditionError,
)
from bcopt.problems import NoisyQuadratic


class TestTwoPointInverseBias:
    def test_closed_form_is_exactly_one_third(self):
        # E[1/p] for p in {0.5, 1.5} is (2 + 2/3)/2 = 4/3, bias 1/3
        assert two_point_inverse_bias(0.5, 1.5) == 1.0 / 3.0

    def test_damping_shrinks_the_bias(self):
        assert two_point_inverse_bias(0.5, 1.5, damping=0.5) < 1.0 / 3.0

    def test_monte_carlo_agrees_with_closed_form(self):
        exp = BiasExperiment(distribution=TwoPoint(0.5, 1.5), ms=(1,),
                             replicates=100_000, estimator="uncorrected",
                             damping=0.0, seed=0)
        point = mc_inverse_bias(exp)[0]
        assert abs(point.bias - 1.0 / 3.0) < 3 * point.stderr


class TestMcInverseBias:
    def test_point_mass_has_zero_bias_for_all_estimators(self):
        for estimator in ("uncorrected", "delta"):
            exp = BiasExperiment(distribution=PointMass(2.0), ms=(4,),
                                 replicates=10_000, estimator=estimator,
                                 damping=0.1, seed=1)
            assert mc_inverse_bias(exp)[0].bias == 0.0
        # the jackknife recombination m*T - ((m-1)/m)*sum(T) rounds 3*T,
        # leaving at most an ulp on constant inputs
        exp = BiasExperiment(distribution=PointMass(2.0), ms=(4,),
                             replicates=10_000, estimator="jackknife",
                             damping=0.1, seed=1)
        assert abs(mc_inverse_bias(exp)[0].bias) < 1e-15

    def test_delta_correction_cuts_lognormal_bias_at_least_4x(self):
        dist = LogNormal(0.0, 0.25)
        kwargs = dict(distribution=dist, ms=(16,), replicates=200_000,
                      damping=0.1, seed=2)
        unc = mc_inverse_bias(BiasExperiment(estimator="uncorrected", **kwargs))[0]
        cor = mc_inverse_bias(BiasExperiment(estimator="delta", **kwargs))[0]
        assert abs(cor.bias) <= abs(unc.bias) / 4.0

    def test_single_draw_only_for_uncorrected(self):
        with pytest.raises(ConfigurationError):
            BiasExperiment(distribution=TwoPoint(), ms=(1,),
                           replicates=10_000, estimator="delta")

    def test_replicate_floor_enforced(self):
        with pytest.raises(ConfigurationError):
            BiasExperiment(distribution=TwoPoint(), ms=(4,), replicates=100)

    def test_domain_violations_abort_above_threshold(self):
        from bcopt.errors import DomainError

        # half the single-draw statistics are negative, far past the 0.1%
        # violation budget
        exp = BiasExperiment(distribution=TwoPoint(-0.5, 1.5), ms=(1,),
                             replicates=10_000, estimator="uncorrected",
                             damping=0.0, seed=0)
        with pytest.raises(DomainError):
            mc_inverse_bias(exp)

    def test_jensen_direction_and_strict_ordering(self):
        # convex damped inverse: uncorrected mean sits above T(true mean),
        # the corrected mean lands strictly between for right-skewed inputs
        for dist in (LogNormal(0.0, 0.5), Gamma(4.0, 1.0)):
            t_true = 1.0 / (dist.mean() + 0.1)
            kwargs = dict(distribution=dist, ms=(8,), replicates=200_000,
                          damping=0.1, seed=3)
            unc = mc_inverse_bias(BiasExperiment(estimator="uncorrected", **kwargs))[0]
            cor = mc_inverse_bias(BiasExperiment(estimator="delta", **kwargs))[0]
            assert unc.bias > 3 * unc.stderr
            assert t_true < t_true + cor.bias < t_true + unc.bias


class TestSlopeFit:
    def test_exact_inverse_power_law(self):
        points = [BiasPoint(m=m, bias=2.0 / m, stderr=1e-9) for m in (8, 16, 32, 64)]
        fit = fit_loglog_slope(points)
        assert abs(fit.slope - (-1.0)) < 1e-6

    def test_exact_three_halves_power_law(self):
        points = [BiasPoint(m=m, bias=5.0 * m ** -1.5, stderr=1e-9)
                  for m in (8, 16, 32, 64, 128)]
        fit = fit_loglog_slope(points)
        assert abs(fit.slope - (-1.5)) < 1e-6

    def test_noise_floor_points_excluded_and_named(self):
        points = [BiasPoint(m=8, bias=1.0, stderr=0.01),
                  BiasPoint(m=16, bias=0.5, stderr=0.01),
                  BiasPoint(m=32, bias=0.25, stderr=0.01),
                  BiasPoint(m=64, bias=0.001, stderr=0.01),
                  BiasPoint(m=128, bias=0.0005, stderr=0.01)]
        with pytest.raises(InsufficientSignalError) as err:
            fit_loglog_slope(points)
        assert set(err.value.floored_ms) == {64, 128}

    def test_lognormal_uncorrected_slope_near_minus_one(self):
        exp = BiasExperiment(distribution=LogNormal(0.0, 0.25),
                             ms=(8, 16, 32, 64, 128, 256), replicates=50_000,
                             estimator="uncorrected", damping=0.1, seed=4)
        fit = fit_loglog_slope(mc_inverse_bias(exp))
        assert -1.15 <= fit.slope <= -0.85


class TestJackknifeResiduals:
    def test_gamma_cancellation_at_m16(self):
        kwargs = dict(distribution=Gamma(4.0, 1.0), ms=(16,),
                      replicates=200_000, damping=0.0, seed=5)
        unc = mc_inverse_bias(BiasExperiment(estimator="uncorrected", **kwargs))[0]
        jack = mc_inverse_bias(BiasExperiment(estimator="jackknife", **kwargs))[0]
        # exact uncorrected bias for gamma(4) stats: 16/63 - 1/4 = 1/252
        assert abs(unc.bias - 1.0 / 252.0) < 3 * unc.stderr
        assert abs(jack.bias) <= abs(unc.bias) / 5.0

    def test_residual_slope_steeper_than_minus_one(self):
        # exponential stats keep the residual resolvable at small m; the
        # exact residual is -1/((m-1)(m-2)), an m^-2 law
        exp = BiasExperiment(distribution=Gamma(1.0, 1.0), ms=(4, 6, 8, 12, 16),
                             replicates=200_000, estimator="jackknife",
                             damping=0.0, seed=6)
        fit = jackknife_residual_experiment(exp)
        assert fit.ci_hi < -1.0
        for point in fit.points:
            exact = -1.0 / ((point.m - 1) * (point.m - 2))
            assert abs(point.bias - exact) < 4 * point.stderr


class TestCouplingCovariance:
    def task(self):
        return NoisyQuadratic.heteroscedastic(dim=10, sigma0=0.5, kappa=3.0,
                                              gradient_coupling=1.0, tail_df=8.0)

    def test_same_batch_coupling_detected(self):
        result = mc_coupling_covariance(self.task(), np.ones(10), batch_size=8,
                                        mode="same_batch", replicates=10_000,
                                        damping=0.1, seed=0)
        assert result.max_abs_z() > 5.0

    def test_cross_fit_consistent_with_zero(self):
        result = mc_coupling_covariance(self.task(), np.ones(10), batch_size=8,
                                        mode="cross_fit", replicates=10_000,
                                        damping=0.1, seed=0)
        assert result.max_abs_z() < 4.0

    def test_cross_fit_z_scores_roughly_standard_normal(self):
        # loose empirical-CDF sanity against the standard normal
        zs = np.concatenate([
            mc_coupling_covariance(self.task(), np.ones(10), batch_size=8,
                                   mode="cross_fit", replicates=10_000,
                                   damping=0.1, seed=s).z_scores
            for s in range(4)
        ])
        from math import erf
        grid = np.sort(zs)
        empirical = np.arange(1, grid.size + 1) / grid.size
        gaussian = 0.5 * (1 + np.vectorize(erf)(grid / np.sqrt(2)))
        assert np.abs(empirical - gaussian).max() < 0.35

    def test_zero_noise_gives_exactly_zero(self):
        task = NoisyQuadratic(hessian=np.ones(4), theta_star=np.zeros(4),
                              noise_scale=np.zeros(4))
        result = mc_coupling_covariance(task, np.ones(4), batch_size=4,
                                        mode="same_batch", replicates=2000,
                                        damping=0.1, seed=1)
        np.testing.assert_array_equal(result.covariance, np.zeros(4))
        np.testing.assert_array_equal(result.z_scores, np.zeros(4))

    def test_replicate_floor(self):
        with pytest.raises(ConfigurationError):
            mc_coupling_covariance(self.task(), np.ones(10), batch_size=8,
                                   mode="same_batch", replicates=10)

    def test_unknown_mode(self):
        with pytest.raises(ConfigurationError):
            mc_coupling_covariance(self.task(), np.ones(10), batch_size=8,
                                   mode="bogus")


def params(**overrides):
    base = dict(smoothness=1.0, precond_min=1.0, precond_max=1.0,
                bias_ratio=0.0, noise_var=0.0, pl_constant=1.0,
                step_size=0.5, initial_gap=1.0)
    base.update(overrides)
    return BoundParams(**base)


class TestBoundCalculators:
    def test_stationarity_hand_value(self):
        # 2*1/(1*10*1*1) + 0 = 0.2
        bound = stationarity_bound(params(step_size=1.0), steps=10)
        assert abs(bound - 0.2) < 1e-12

    def test_contraction_hand_value(self):
        # 0.5*1*1 - (1*0.25/2)*1 = 0.375
        assert abs(contraction_coefficient(params()) - 0.375) < 1e-12

    def test_trajectory_decays_to_zero_without_noise(self):
        bounds, c = pl_trajectory_bound(params(step_size=0.1), steps=2000)
        assert c > 0
        assert bounds[0] == 1.0
        assert bounds[-1] < 1e-12

    def test_stationarity_vanishes_with_horizon_when_noiseless(self):
        assert stationarity_bound(params(), steps=10**9) < 1e-8

    def test_step_size_condition_reports_max(self):
        with pytest.raises(PreconditionError) as err:
            stationarity_bound(params(step_size=2.0), steps=10)
        assert abs(err.value.max_step_size - 1.0) < 1e-12

    def test_contraction_condition_violation(self):
        with pytest.raises(PreconditionError):
            pl_trajectory_bound(params(pl_constant=10.0), steps=5)

    def test_monotone_in_bias_ratio(self):
        lo = stationarity_bound(params(bias_ratio=0.0, step_size=0.2,
                                       noise_var=1.0), steps=50)
        hi = stationarity_bound(params(bias_ratio=0.3, step_size=0.2,
                                       noise_var=1.0), steps=50)
        assert hi > lo

    def test_monotone_in_noise(self):
        lo = stationarity_bound(params(noise_var=0.0, step_size=0.2), steps=50)
        hi = stationarity_bound(params(noise_var=1.0, step_size=0.2), steps=50)
        assert hi > lo

    def test_monotone_in_preconditioner_floor(self):
        weak = stationarity_bound(params(precond_min=0.5, precond_max=1.0,
                                         step_size=0.2, noise_var=1.0), steps=50)
        strong = stationarity_bound(params(precond_min=1.0, precond_max=1.0,
                                           step_size=0.2, noise_var=1.0), steps=50)
        assert weak > strong

    def test_better_contraction_means_smaller_factor(self):
        # the corrected method's larger coefficient strictly improves the
        # per-step factor when both satisfy the contraction condition
        c_std = contraction_coefficient(params(bias_ratio=0.3, step_size=0.2))
        c_bc = contraction_coefficient(params(bias_ratio=0.0, step_size=0.2))
        assert c_bc > c_std
        assert 1 - 2 * 1.0 * c_bc < 1 - 2 * 1.0 * c_std


class TestTrajectoryAgainstBound:
    def test_measured_sgd_stays_under_bound(self):
        d = 12
        hess = np.linspace(1.0, 50.0, d)
        task = NoisyQuadratic(hessian=hess, theta_star=np.zeros(d),
                              noise_scale=0.4 * np.ones(d))
        precond_inv = 1.0 / hess
        sigma_sq = measure_update_noise(task, np.ones(d), batch_size=8,
                                        precond_inv=precond_inv,
                                        replicates=3000, seed=0)
        theta0 = np.ones(d)
        p = BoundParams(smoothness=50.0, precond_min=1.0 / 50.0, precond_max=1.0,
                        bias_ratio=0.0, noise_var=sigma_sq, pl_constant=1.0,
                        step_size=1.0 / 50.0 / 50.0, initial_gap=task.loss(theta0))
        steps = 200
        bounds, _ = pl_trajectory_bound(p, steps)
        trajectories = np.stack([
            run_preconditioned_sgd(task, theta0, precond_inv, p.step_size,
                                   steps, batch_size=8, seed=s)
            for s in range(10)
        ])
        assert np.all(trajectories.mean(axis=0) <= bounds)


class TestEigenbasisResidual:
    def test_commuting_residual_smaller_than_noncommuting(self):
        out = eigenbasis_residual_experiment(dim=5, m=6, replicates=60, seed=0)
        assert out.commuting < out.noncommuting
        # reported for information; the rotation terms have no asserted target
        print(f"eigenbasis residual: commuting {out.commuting:.4f} "
              f"noncommuting {out.noncommuting:.4f}")
