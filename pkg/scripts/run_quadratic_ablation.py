"""Four-variant ablation on the heteroscedastic noisy quadratic.

Writes the step records and a summary with deltas against the same-batch
baseline into --out (default ablation_out/). Mirrors the acceptance
training-check task at a shorter horizon so it finishes in seconds.

Run: python scripts/run_quadratic_ablation.py [--steps 500] [--out DIR]
"""

import argparse
import sys
import tempfile
import textwrap

from bcopt.cli import main as cli_main

CONFIG = """
[run]
name = quad_ablation
task = quadratic
optimizer = adamw
variant = std
steps = {steps}
batch_size = 32
microbatches = 8
seeds = 0, 1, 2
eval_every = 50
final_k = 50

[task]
dim = 50
sigma0 = 0.6
kappa = 4.0

[optimizer]
lr = 0.01
beta1 = 0.9
beta2 = 0.8
grad_clip = 0.0

[schedule]
warmup = 20
floor_fraction = 1.0
"""


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--steps", type=int, default=500)
    parser.add_argument("--out", default="ablation_out")
    args = parser.parse_args()
    with tempfile.NamedTemporaryFile("w", suffix=".ini", delete=False) as fh:
        fh.write(textwrap.dedent(CONFIG.format(steps=args.steps)))
        path = fh.name
    return cli_main(["ablate", "--config", path, "--out", args.out])


if __name__ == "__main__":
    sys.exit(main())
