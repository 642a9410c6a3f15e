"""Monte Carlo oracles for the statistical claims, plus bound calculators.

The lab measures, by direct simulation against analytic truth:

* how biased the damped inverse of a microbatch mean is, and how much of
  that bias the delta and jackknife corrections remove (``mc_inverse_bias``);
* how strongly a same-batch gradient couples with its own inverse
  preconditioner, and that cross-fitting removes the coupling
  (``mc_coupling_covariance``);
* the decay order of the residual bias in the microbatch count via a
  log-log slope fit with a noise-floor rule (``fit_loglog_slope``).

The calculators evaluate the stationarity and PL-contraction bounds of the
convergence analysis so measured trajectories can be checked against them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import (
    ConfigurationError,
    DomainError,
    InsufficientSignalError,
    PreconditionError,
)
from .estimators import (
    MicrobatchDiagSet,
    SpectralMap,
    corrected_diag_inverse,
    corrected_inverse_root_eigs,
    jackknife_inverse,
    mean_and_var_of_mean,
    project_microbatch_matrices,
)
from .linalg import SymMatrix, sym_eigen

MIN_REPLICATES = 10_000
MAX_VIOLATION_RATE = 1e-3

ESTIMATORS = ("uncorrected", "delta", "jackknife")


# ---------------------------------------------------------------------------
# sampling distributions for microbatch statistics


@dataclass(frozen=True)
class LogNormal:
    mu: float = 0.0
    sigma: float = 0.25

    def sample(self, rng, shape):
        return rng.lognormal(self.mu, self.sigma, size=shape)

    def mean(self) -> float:
        return float(np.exp(self.mu + 0.5 * self.sigma**2))


@dataclass(frozen=True)
class TwoPoint:
    lo: float = 0.5
    hi: float = 1.5

    def sample(self, rng, shape):
        return np.where(rng.random(shape) < 0.5, self.lo, self.hi)

    def mean(self) -> float:
        return 0.5 * (self.lo + self.hi)


@dataclass(frozen=True)
class Gamma:
    shape: float = 4.0
    scale: float = 1.0

    def sample(self, rng, shape):
        return rng.gamma(self.shape, self.scale, size=shape)

    def mean(self) -> float:
        return self.shape * self.scale


@dataclass(frozen=True)
class PointMass:
    value: float = 1.0

    def sample(self, rng, shape):
        return np.full(shape, self.value)

    def mean(self) -> float:
        return self.value


# ---------------------------------------------------------------------------
# inverse-bias experiments


@dataclass(frozen=True)
class BiasExperiment:
    """One inverse-bias measurement: distribution, m sweep, estimator."""

    distribution: object
    ms: tuple
    replicates: int = 200_000
    estimator: str = "uncorrected"
    damping: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.estimator not in ESTIMATORS:
            raise ConfigurationError(
                f"unknown estimator {self.estimator!r} (valid: {ESTIMATORS})"
            )
        if self.replicates < MIN_REPLICATES:
            raise ConfigurationError(
                f"need at least {MIN_REPLICATES} replicates, got {self.replicates}"
            )
        ms = tuple(int(m) for m in self.ms)
        # A single-draw sweep point is meaningful only for the uncorrected
        # inverse; the corrections need m >= 2 for the variance of the mean.
        floor = 1 if self.estimator == "uncorrected" else 2
        if not ms or min(ms) < floor:
            raise ConfigurationError(
                f"estimator {self.estimator!r} needs every m >= {floor}, got {ms}"
            )
        object.__setattr__(self, "ms", ms)


@dataclass(frozen=True)
class BiasPoint:
    m: int
    bias: float
    stderr: float
    violations: int = 0


def mc_inverse_bias(experiment: BiasExperiment) -> list:
    """Monte Carlo bias of the chosen estimator at each m.

    bias(m) = mean over replicates of estimator(samples) - T(true mean),
    where T is the damped inverse. Domain violations are counted and the
    run aborts above a 0.1% violation rate.
    """
    dist = experiment.distribution
    lam = experiment.damping
    rng = np.random.default_rng(experiment.seed)
    t_true = 1.0 / (dist.mean() + lam)
    points = []
    for m in experiment.ms:
        samples = dist.sample(rng, (m, experiment.replicates))
        values, violations = _estimator_values(samples, experiment.estimator, lam)
        # centering before the mean keeps a zero-variance input at exactly 0
        bias = float((values - t_true).mean())
        stderr = float(values.std(ddof=1) / np.sqrt(values.size))
        points.append(BiasPoint(m=m, bias=bias, stderr=stderr, violations=violations))
    return points


def _estimator_values(samples: np.ndarray, estimator: str, lam: float):
    """Estimator values per replicate; replicates are columns."""
    m, replicates = samples.shape
    pbar = samples.mean(axis=0)
    valid = pbar + lam > 0.0
    if estimator == "jackknife" and m >= 2:
        loo = (m * pbar - samples) / (m - 1.0)
        valid &= np.all(loo + lam > 0.0, axis=0)
    violations = int(np.count_nonzero(~valid))
    if violations > MAX_VIOLATION_RATE * replicates:
        raise DomainError(
            f"{violations} domain violations out of {replicates} replicates"
        )
    cols = samples[:, valid]
    if estimator == "uncorrected":
        values = 1.0 / (cols.mean(axis=0) + lam)
    elif estimator == "delta":
        mv = mean_and_var_of_mean(MicrobatchDiagSet(cols))
        values = corrected_diag_inverse(mv, damping=lam).values
    else:
        values = jackknife_inverse(MicrobatchDiagSet(cols), damping=lam)
    return values, violations


def two_point_inverse_bias(lo: float, hi: float, damping: float = 0.0) -> float:
    """Closed-form single-draw inverse bias for the equiprobable two-point
    distribution, E[1/(p+lam)] - 1/(E[p]+lam), evaluated in exact rational
    arithmetic over the given float inputs."""
    lo_f, hi_f, lam = Fraction(lo), Fraction(hi), Fraction(damping)
    mean = (lo_f + hi_f) / 2
    expected_inverse = (1 / (lo_f + lam) + 1 / (hi_f + lam)) / 2
    return float(expected_inverse - 1 / (mean + lam))


# ---------------------------------------------------------------------------
# scaling fits


@dataclass(frozen=True)
class ScalingFit:
    """Log-log slope of |bias| against m, with a residual-based CI.

    Only points whose |bias| exceeds 3 standard errors enter the fit;
    the rest are flagged as noise-floor points.
    """

    slope: float
    ci_lo: float
    ci_hi: float
    used_ms: tuple
    floored_ms: tuple
    points: tuple = field(default_factory=tuple)


def fit_loglog_slope(points, min_points: int = 4, z_threshold: float = 3.0) -> ScalingFit:
    """OLS fit of log|bias| on log m over points above the noise floor."""
    pts = list(points)
    above = [abs(p.bias) > z_threshold * p.stderr for p in pts]
    usable = [p for p, ok in zip(pts, above) if ok]
    floored = tuple(p.m for p, ok in zip(pts, above) if not ok)
    if len(usable) < min_points:
        raise InsufficientSignalError(
            f"only {len(usable)} of {len(pts)} m values above the noise floor "
            f"(floored: {sorted(floored)})",
            floored_ms=floored,
        )
    x = np.log([p.m for p in usable])
    y = np.log([abs(p.bias) for p in usable])
    xc = x - x.mean()
    slope = float((xc * y).sum() / (xc * xc).sum())
    intercept = float(y.mean() - slope * x.mean())
    resid = y - (intercept + slope * x)
    dof = max(len(usable) - 2, 1)
    se = float(np.sqrt((resid @ resid) / dof / (xc * xc).sum()))
    return ScalingFit(
        slope=slope,
        ci_lo=slope - 1.96 * se,
        ci_hi=slope + 1.96 * se,
        used_ms=tuple(p.m for p in usable),
        floored_ms=floored,
        points=tuple(pts),
    )


def jackknife_residual_experiment(experiment: BiasExperiment) -> ScalingFit:
    """Residual-bias scaling of the jackknife estimator."""
    exp = BiasExperiment(
        distribution=experiment.distribution,
        ms=experiment.ms,
        replicates=experiment.replicates,
        estimator="jackknife",
        damping=experiment.damping,
        seed=experiment.seed,
    )
    return fit_loglog_slope(mc_inverse_bias(exp))


# ---------------------------------------------------------------------------
# coupling covariance


@dataclass(frozen=True)
class CouplingResult:
    covariance: np.ndarray
    stderr: np.ndarray
    z_scores: np.ndarray
    mode: str
    replicates: int

    def max_abs_z(self) -> float:
        return float(np.max(np.abs(self.z_scores)))


def mc_coupling_covariance(task, params: np.ndarray, batch_size: int, mode: str,
                           replicates: int = 10_000, damping: float = 0.1,
                           seed: int = 0) -> CouplingResult:
    """Coordinatewise covariance between the inverse preconditioner and the
    gradient, estimated over independent fresh batches.

    Each replicate draws a fresh batch of per-example gradients. In
    ``same_batch`` mode the mean gradient and the second-moment statistic
    come from the same examples; in ``cross_fit`` mode from disjoint
    halves. Reported z-scores are covariance / stderr (0 where the
    covariance is exactly degenerate).
    """
    if mode not in ("same_batch", "cross_fit"):
        raise ConfigurationError(f"unknown split mode {mode!r}")
    if replicates < 1000:
        raise ConfigurationError(f"need >= 1000 replicates, got {replicates}")
    if mode == "cross_fit" and batch_size < 2:
        raise ConfigurationError("cross_fit mode needs a batch of at least 2")
    rng = np.random.default_rng(seed)
    n = batch_size
    d = params.shape[0]
    rows = task.example_gradients(params, np.arange(replicates * n), rng)
    rows = rows.reshape(replicates, n, d)
    if mode == "same_batch":
        g = rows.mean(axis=1)
        p = (rows**2).mean(axis=1)
    else:
        half = n // 2
        g = rows[:, :half].mean(axis=1)
        p = (rows[:, half:] ** 2).mean(axis=1)
    h = 1.0 / (p + damping)
    w = (h - h.mean(axis=0)) * (g - g.mean(axis=0))
    cov = w.mean(axis=0) * replicates / (replicates - 1.0)
    se = w.std(axis=0, ddof=1) / np.sqrt(replicates)
    z = np.divide(cov, se, out=np.zeros_like(cov), where=se > 0)
    return CouplingResult(covariance=cov, stderr=se, z_scores=z,
                          mode=mode, replicates=replicates)


# ---------------------------------------------------------------------------
# convergence bound calculators


@dataclass(frozen=True)
class BoundParams:
    """Constants of the convergence analysis.

    smoothness: gradient Lipschitz constant of the objective.
    precond_min/precond_max: spectral bounds on the inverse preconditioner.
    bias_ratio: relative conditional update bias, in [0, 1).
    noise_var: conditional update variance bound sigma^2.
    pl_constant: PL constant of the objective.
    step_size: constant learning rate eta.
    initial_gap: f(theta_0) - f*.
    """

    smoothness: float
    precond_min: float
    precond_max: float
    bias_ratio: float
    noise_var: float
    pl_constant: float
    step_size: float
    initial_gap: float

    def __post_init__(self):
        if not 0.0 < self.precond_min <= self.precond_max:
            raise ConfigurationError("need 0 < precond_min <= precond_max")
        if not 0.0 <= self.bias_ratio < 1.0:
            raise ConfigurationError("bias_ratio must lie in [0, 1)")
        if self.noise_var < 0.0 or self.step_size <= 0.0:
            raise ConfigurationError("noise_var >= 0 and step_size > 0 required")


def max_admissible_step(p: BoundParams) -> float:
    denom = p.smoothness * (p.precond_max + p.bias_ratio * p.precond_min) ** 2
    return p.precond_min * (1.0 - p.bias_ratio) / denom


def _check_step_size(p: BoundParams) -> None:
    limit = max_admissible_step(p)
    if p.step_size > limit * (1.0 + 1e-12):
        raise PreconditionError(
            f"step size {p.step_size:g} violates the bound condition; "
            f"max admissible is {limit:g}",
            max_step_size=limit,
        )


def stationarity_bound(p: BoundParams, steps: int) -> float:
    """Upper bound on the average squared gradient norm over the horizon:
    2*gap/(eta*T*mu*(1-rho)) + L*eta*sigma^2/(mu*(1-rho))."""
    _check_step_size(p)
    if steps < 1:
        raise ConfigurationError("steps must be >= 1")
    mu_eff = p.precond_min * (1.0 - p.bias_ratio)
    return (
        2.0 * p.initial_gap / (p.step_size * steps * mu_eff)
        + p.smoothness * p.step_size * p.noise_var / mu_eff
    )


def contraction_coefficient(p: BoundParams) -> float:
    """c = eta*mu*(1-rho) - (L*eta^2/2)*(M + rho*mu)^2, the per-step descent
    coefficient under the PL analysis."""
    drift = p.step_size * p.precond_min * (1.0 - p.bias_ratio)
    curvature = (
        0.5 * p.smoothness * p.step_size**2
        * (p.precond_max + p.bias_ratio * p.precond_min) ** 2
    )
    return drift - curvature


def pl_trajectory_bound(p: BoundParams, steps: int) -> tuple:
    """Per-step suboptimality bound under the PL condition.

    Returns (bounds, c) with bounds[t] = (1 - 2*mu_pl*c)^t * gap + floor
    for t = 0..steps, floor = L*eta^2*sigma^2 / (4*mu_pl*c).
    """
    _check_step_size(p)
    c = contraction_coefficient(p)
    rate_drop = 2.0 * p.pl_constant * c
    if not 0.0 < rate_drop < 1.0:
        raise PreconditionError(
            f"contraction condition violated: 2*mu_pl*c = {rate_drop:g} not in (0, 1)"
        )
    floor = p.smoothness * p.step_size**2 * p.noise_var / (4.0 * p.pl_constant * c)
    t = np.arange(steps + 1)
    bounds = (1.0 - rate_drop) ** t * p.initial_gap + floor
    return bounds, c


# ---------------------------------------------------------------------------
# empirical measurement helpers for the bound checks


def measure_update_noise(task, params: np.ndarray, batch_size: int,
                         precond_inv: np.ndarray, replicates: int = 2000,
                         seed: int = 0) -> float:
    """Monte Carlo estimate of the conditional update variance
    E||u - E[u]||^2 for u = H_inv * batch mean gradient."""
    rng = np.random.default_rng(seed)
    d = params.shape[0]
    rows = task.example_gradients(params, np.arange(replicates * batch_size), rng)
    g = rows.reshape(replicates, batch_size, d).mean(axis=1)
    u = g * precond_inv
    centered = u - u.mean(axis=0)
    return float((centered**2).sum(axis=1).mean())


def run_preconditioned_sgd(task, theta0: np.ndarray, precond_inv: np.ndarray,
                           step_size: float, steps: int, batch_size: int,
                           seed: int = 0) -> np.ndarray:
    """Suboptimality trajectory of theta <- theta - eta * H_inv * ghat with a
    fixed diagonal inverse preconditioner. Returns f(theta_t) - f* for
    t = 0..steps."""
    rng = np.random.default_rng(seed)
    theta = theta0.copy()
    _, _, f_star = _quadratic_constants(task)
    gaps = np.empty(steps + 1)
    gaps[0] = task.loss(theta) - f_star
    for t in range(steps):
        rows = task.example_gradients(theta, np.arange(batch_size), rng)
        theta = theta - step_size * precond_inv * rows.mean(axis=0)
        gaps[t + 1] = task.loss(theta) - f_star
    return gaps


def _quadratic_constants(task):
    from .problems import analytic_constants

    return analytic_constants(task)


# ---------------------------------------------------------------------------
# eigenbasis-approximation residual (reported, no target asserted)


@dataclass(frozen=True)
class EigenbasisResidual:
    commuting: float
    noncommuting: float
    replicates: int


def eigenbasis_residual_experiment(dim: int = 6, m: int = 8,
                                   noncommuting_scale: float = 0.3,
                                   replicates: int = 200, alpha: float = 0.25,
                                   seed: int = 0) -> EigenbasisResidual:
    """Residual of the eigenbasis inverse-root correction, measured under
    commuting and non-commuting microbatch perturbations.

    The correction is exact (to higher order) along shared eigendirections;
    when microbatch perturbations rotate the eigenbasis, uncorrected
    basis-rotation terms remain. This experiment reports the mean
    Frobenius distance between the corrected operator built from perturbed
    microbatches and the true inverse-root of the population matrix, in
    both regimes, without asserting a target for the non-commuting one.
    """
    rng = np.random.default_rng(seed)
    base_vals = np.linspace(2.0, 1.0, dim)
    q0 = sym_eigen(SymMatrix(_random_symmetric(rng, dim))).basis
    population = SymMatrix(q0 @ np.diag(base_vals) @ q0.T)
    pop_eig = sym_eigen(population)
    spectral = SpectralMap(alpha=alpha, damping=0.0)
    truth = (pop_eig.basis * spectral.value(pop_eig.eigenvalues)) @ pop_eig.basis.T

    residuals = {True: [], False: []}
    for commuting in (True, False):
        for _ in range(replicates):
            mats = []
            for _ in range(m):
                diag_pert = 0.3 * rng.standard_normal(dim)
                pert = np.diag(diag_pert)
                if not commuting:
                    skew = noncommuting_scale * rng.standard_normal((dim, dim))
                    pert = pert + 0.5 * (skew + skew.T) - np.diag(np.diag(skew))
                mats.append(SymMatrix(q0 @ (np.diag(base_vals) + pert) @ q0.T))
            mean_mat = SymMatrix(sum(mat.mat for mat in mats) / m)
            eig = sym_eigen(mean_mat)
            projected = project_microbatch_matrices(mats, eig.basis)
            mv = mean_and_var_of_mean(projected)
            ci = corrected_inverse_root_eigs(eig.eigenvalues, mv.var_of_mean, spectral)
            op = (eig.basis * ci.values) @ eig.basis.T
            residuals[commuting].append(float(np.linalg.norm(op - truth)))
    return EigenbasisResidual(
        commuting=float(np.mean(residuals[True])),
        noncommuting=float(np.mean(residuals[False])),
        replicates=replicates,
    )


def _random_symmetric(rng, dim: int) -> np.ndarray:
    a = rng.standard_normal((dim, dim))
    return 0.5 * (a + a.T)
