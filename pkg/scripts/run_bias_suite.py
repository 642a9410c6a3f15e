"""End-to-end Monte Carlo bias suite.

Runs the inverse-bias scaling sweep, the jackknife residual sweep, the
coupling covariance experiment, and the convergence-bound calculators,
writing all CSVs under --out (default bias_out/). This reproduces the
quantities the acceptance suite checks, at the same replicate counts.

Run: python scripts/run_bias_suite.py [--out DIR]
"""

import argparse
import sys
import tempfile
import textwrap

from bcopt.cli import main as cli_main

CONFIG = """
[bias]
distribution = lognormal
mu = 0.0
sigma = 0.25
ms = 8, 16, 32, 64, 128, 256
replicates = 200000
damping = 0.1
estimators = uncorrected, delta
seed = 0

[coupling]
dim = 10
batch_size = 8
replicates = 10000
damping = 0.1
sigma0 = 0.5
kappa = 3.0
gradient_coupling = 1.0
tail_df = 8.0
seed = 0

[bounds]
smoothness = 100.0
precond_min = 0.01
precond_max = 1.0
bias_ratio = 0.0
noise_var = 0.033
pl_constant = 1.0
step_size = 1e-4
initial_gap = 505.0
steps = 400
"""

JACKKNIFE_CONFIG = """
[bias]
distribution = gamma
shape = 1.0
scale = 1.0
ms = 4, 6, 8, 12, 16
replicates = 200000
damping = 0.0
seed = 6
"""


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--out", default="bias_out")
    args = parser.parse_args()

    def write(text):
        fh = tempfile.NamedTemporaryFile("w", suffix=".ini", delete=False)
        fh.write(textwrap.dedent(text))
        fh.close()
        return fh.name

    shared = write(CONFIG)
    jack = write(JACKKNIFE_CONFIG)
    for argv in (
        ["bias", "inverse", "--config", shared, "--out", args.out],
        ["bias", "jackknife", "--config", jack, "--out", args.out],
        ["bias", "coupling", "--config", shared, "--out", args.out],
        ["bounds", "--config", shared, "--out", args.out],
    ):
        code = cli_main(argv)
        if code != 0:
            return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
