"""Calibrate the training-check task's noise scale.

Reports, for a sweep of sigma0 values, the signal-to-noise ratio of the
per-microbatch denominator statistics on the heteroscedastic quadratic:
both the second-moment statistic g_mb**2 (whose inverse bias the delta
correction targets) and the square-root denominator |g_mb| that enters the
update. The acceptance training check freezes sigma0 = 0.6, where the two
definitions bracket 1 (about 0.8 and 1.4 at the median coordinate).

Run: python scripts/calibrate_noise.py
"""

import numpy as np

from bcopt.problems import NoisyQuadratic

DIM = 50
KAPPA = 4.0
MICROBATCH_SIZE = 4  # B group of 32 examples split into m = 8 microbatches
REPLICATES = 4000
INIT_SEEDS = range(8)


def snr_table(sigma0):
    task = NoisyQuadratic.heteroscedastic(dim=DIM, sigma0=sigma0, kappa=KAPPA,
                                          hessian=np.ones(DIM))
    second, sqrt_stat = [], []
    for seed in INIT_SEEDS:
        theta0 = np.random.default_rng([seed, 101]).standard_normal(DIM)
        rows = task.example_gradients(
            theta0, np.arange(REPLICATES * MICROBATCH_SIZE),
            np.random.default_rng(1),
        )
        micro = rows.reshape(REPLICATES, MICROBATCH_SIZE, DIM).mean(axis=1)
        p2 = micro**2
        p1 = np.abs(micro)
        second.append(np.median(p2.mean(axis=0) / p2.std(axis=0)))
        sqrt_stat.append(np.median(p1.mean(axis=0) / p1.std(axis=0)))
    return float(np.mean(second)), float(np.mean(sqrt_stat))


def main():
    print(f"heteroscedastic quadratic: dim={DIM}, kappa={KAPPA}, "
          f"microbatch size {MICROBATCH_SIZE}")
    print(f"{'sigma0':>8} {'SNR(g^2)':>10} {'SNR(|g|)':>10}")
    for sigma0 in (0.2, 0.3, 0.4, 0.5, 0.6, 0.8, 1.0):
        s2, s1 = snr_table(sigma0)
        mark = "  <- frozen in the acceptance check" if sigma0 == 0.6 else ""
        print(f"{sigma0:>8} {s2:>10.2f} {s1:>10.2f}{mark}")


if __name__ == "__main__":
    main()
