import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bcopt.errors import (
    DomainError,
    InsufficientMicrobatchesError,
    InvalidInputError,
)
from bcopt.estimators import (
    MeanVar,
    MicrobatchDiagSet,
    SpectralMap,
    corrected_diag_inverse,
    corrected_inverse_root_eigs,
    jackknife_inverse,
    mean_and_var_of_mean,
    project_microbatch_matrices,
)
from bcopt.linalg import SymMatrix, sym_eigen

@st.composite
def sample_matrices(draw):
    m = draw(st.integers(2, 8))
    d = draw(st.integers(1, 5))
    seed = draw(st.integers(0, 10_000))
    return np.random.default_rng(seed).uniform(0.5, 3.0, size=(m, d))


class TestMeanAndVarOfMean:
    def test_constant_samples(self):
        mv = mean_and_var_of_mean(MicrobatchDiagSet(np.full((4, 3), 2.0)))
        np.testing.assert_array_equal(mv.mean, np.full(3, 2.0))
        np.testing.assert_array_equal(mv.var_of_mean, np.zeros(3))

    def test_two_sample_hand_value(self):
        # samples 1, 3: mean 2, var of the mean ((1-2)^2+(3-2)^2)/(2*1) = 1
        mv = mean_and_var_of_mean(MicrobatchDiagSet(np.array([[1.0], [3.0]])))
        assert mv.mean[0] == 2.0
        assert mv.var_of_mean[0] == 1.0

    def test_scaling_homogeneity(self):
        rng = np.random.default_rng(0)
        s = rng.uniform(0.5, 2.0, size=(6, 4))
        base = mean_and_var_of_mean(MicrobatchDiagSet(s))
        scaled = mean_and_var_of_mean(MicrobatchDiagSet(3.0 * s))
        np.testing.assert_allclose(scaled.var_of_mean, 9.0 * base.var_of_mean,
                                   rtol=1e-12)

    def test_single_microbatch_rejected(self):
        with pytest.raises(InsufficientMicrobatchesError):
            MicrobatchDiagSet(np.ones((1, 3)))

    def test_monte_carlo_unbiasedness(self):
        # the variance-of-mean estimator targets true Var / m
        rng = np.random.default_rng(42)
        m, reps, true_var = 8, 40_000, 4.0
        samples = rng.normal(1.0, np.sqrt(true_var), size=(m, reps))
        mv = mean_and_var_of_mean(MicrobatchDiagSet(samples))
        target = true_var / m
        se = mv.var_of_mean.std(ddof=1) / np.sqrt(reps)
        assert abs(mv.var_of_mean.mean() - target) < 3 * se


class TestCorrectedDiagInverse:
    def test_zero_variance_reduces_to_plain_inverse(self):
        mv = MeanVar(mean=np.array([1.0]), var_of_mean=np.array([0.0]))
        out = corrected_diag_inverse(mv, damping=0.0)
        assert out.values[0] == 1.0
        assert out.clamp_count == 0

    def test_hand_value(self):
        # 1/1 - 0.5/1^3 = 0.5
        mv = MeanVar(mean=np.array([1.0]), var_of_mean=np.array([0.5]))
        assert corrected_diag_inverse(mv).values[0] == 0.5

    def test_clamp_at_zero(self):
        # raw value 1 - 2 = -1, clipped to 0
        mv = MeanVar(mean=np.array([1.0]), var_of_mean=np.array([2.0]))
        out = corrected_diag_inverse(mv)
        assert out.values[0] == 0.0
        assert out.clamp_count == 1

    def test_zero_variance_equals_damped_inverse_exactly(self):
        rng = np.random.default_rng(1)
        mean = rng.uniform(0.1, 5.0, size=20)
        mv = MeanVar(mean=mean, var_of_mean=np.zeros(20))
        out = corrected_diag_inverse(mv, damping=0.25)
        np.testing.assert_array_equal(out.values, 1.0 / (mean + 0.25))

    def test_domain_error_names_coordinate(self):
        mv = MeanVar(mean=np.array([1.0, -2.0]), var_of_mean=np.zeros(2))
        with pytest.raises(DomainError) as err:
            corrected_diag_inverse(mv, damping=0.5)
        assert err.value.coordinate == 1

    def test_correction_l2_diagnostic(self):
        mv = MeanVar(mean=np.array([1.0, 2.0]), var_of_mean=np.array([0.1, 0.4]))
        out = corrected_diag_inverse(mv)
        expected = np.hypot(0.1 / 1.0, 0.4 / 8.0)
        assert abs(out.correction_l2 - expected) < 1e-15


class TestJackknife:
    def test_two_point_hand_value(self):
        # T=1/x on samples (1, 3): 2*(1/2) - (1/2)*(1 + 1/3) = 1/3
        stats = MicrobatchDiagSet(np.array([[1.0], [3.0]]))
        out = jackknife_inverse(stats)
        np.testing.assert_allclose(out, [1.0 / 3.0], atol=1e-15)

    def test_linear_functional_passes_through(self):
        rng = np.random.default_rng(2)
        stats = MicrobatchDiagSet(rng.uniform(1.0, 4.0, size=(6, 5)))
        out = jackknife_inverse(stats, functional=lambda x: 2.0 * x)
        np.testing.assert_allclose(out, 2.0 * stats.samples.mean(axis=0),
                                   atol=1e-12)

    def test_constant_samples_give_plain_inverse(self):
        stats = MicrobatchDiagSet(np.full((5, 3), 4.0))
        np.testing.assert_allclose(jackknife_inverse(stats), np.full(3, 0.25),
                                   atol=1e-15)

    def test_domain_error_on_undefined_point(self):
        stats = MicrobatchDiagSet(np.array([[1.0], [-1.0]]))
        with pytest.raises(DomainError):
            jackknife_inverse(stats)  # a leave-one-out mean is negative

    @settings(max_examples=40, deadline=None)
    @given(samples=sample_matrices(),
           a=st.floats(-3, 3), b=st.floats(-3, 3))
    def test_affine_exactness_property(self, samples, a, b):
        stats = MicrobatchDiagSet(samples)
        out = jackknife_inverse(stats, functional=lambda x: a + b * x)
        np.testing.assert_allclose(out, a + b * stats.samples.mean(axis=0),
                                   atol=1e-12)


class TestSpectralCorrection:
    def test_zero_variance(self):
        out = corrected_inverse_root_eigs(
            np.array([1.0]), np.array([0.0]), SpectralMap(alpha=0.25)
        )
        assert out.values[0] == 1.0

    def test_quarter_root_hand_value(self):
        # T''(1) = (1/4)(5/4) = 5/16, so the correction is (5/32) * 0.32 = 0.05
        out = corrected_inverse_root_eigs(
            np.array([1.0]), np.array([0.32]), SpectralMap(alpha=0.25)
        )
        np.testing.assert_allclose(out.values, [0.95], atol=1e-15)

    def test_alpha_one_matches_diag_correction(self):
        rng = np.random.default_rng(3)
        eigs = rng.uniform(0.5, 4.0, size=12)
        var = rng.uniform(0.0, 0.3, size=12)
        lam = 0.1
        spectral = corrected_inverse_root_eigs(
            eigs, var, SpectralMap(alpha=1.0, damping=lam)
        )
        diag = corrected_diag_inverse(MeanVar(mean=eigs, var_of_mean=var), lam)
        np.testing.assert_allclose(spectral.values, diag.values, atol=1e-12)
        assert spectral.clamp_count == diag.clamp_count

    def test_cap_applies(self):
        out = corrected_inverse_root_eigs(
            np.array([1e-4]), np.array([0.0]), SpectralMap(alpha=0.25), cap=2.0
        )
        assert out.values[0] == 2.0

    def test_domain_error(self):
        with pytest.raises(DomainError):
            corrected_inverse_root_eigs(
                np.array([-0.5]), np.array([0.0]), SpectralMap(alpha=0.25)
            )

    def test_invalid_alpha(self):
        with pytest.raises(InvalidInputError):
            SpectralMap(alpha=1.5)


class TestProjection:
    def test_identity_basis_returns_diagonals(self):
        rng = np.random.default_rng(4)
        mats = [SymMatrix(0.5 * (a + a.T))
                for a in rng.standard_normal((3, 5, 5))]
        out = project_microbatch_matrices(mats, np.eye(5))
        for j, mat in enumerate(mats):
            np.testing.assert_allclose(out.samples[j], np.diagonal(mat.mat),
                                       atol=1e-14)

    def test_exact_diagonalization(self):
        rng = np.random.default_rng(5)
        q = sym_eigen(SymMatrix(_rand_sym(rng, 4))).basis
        lam = np.array([4.0, 3.0, 2.0, 1.0])
        mats = [SymMatrix(q @ np.diag(lam) @ q.T) for _ in range(3)]
        out = project_microbatch_matrices(mats, q)
        for row in out.samples:
            np.testing.assert_allclose(row, lam, atol=1e-10)

    def test_commuting_perturbations_recovered(self):
        rng = np.random.default_rng(6)
        q = sym_eigen(SymMatrix(_rand_sym(rng, 5))).basis
        lam = np.linspace(5.0, 1.0, 5)
        perturbations = [0.1 * rng.standard_normal(5) for _ in range(4)]
        mats = [SymMatrix(q @ np.diag(lam + d) @ q.T) for d in perturbations]
        out = project_microbatch_matrices(mats, q)
        for row, d in zip(out.samples, perturbations):
            np.testing.assert_allclose(row, lam + d, atol=1e-10)

    def test_linearity_mean_of_projections(self):
        rng = np.random.default_rng(7)
        mats = [SymMatrix(_rand_sym(rng, 6)) for _ in range(5)]
        q = sym_eigen(SymMatrix(_rand_sym(rng, 6))).basis
        out = project_microbatch_matrices(mats, q)
        mean_mat = sum(m.mat for m in mats) / 5.0
        expected = np.diagonal(q.T @ mean_mat @ q)
        np.testing.assert_allclose(out.samples.mean(axis=0), expected,
                                   atol=1e-12)

    def test_dim_mismatch(self):
        mats = [SymMatrix(np.eye(3)), SymMatrix(np.eye(3))]
        with pytest.raises(InvalidInputError):
            project_microbatch_matrices(mats, np.eye(4))


def _rand_sym(rng, dim):
    a = rng.standard_normal((dim, dim))
    return 0.5 * (a + a.T)
