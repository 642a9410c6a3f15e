"""Command line entry point.

Subcommands:
    train            one optimizer run per seed, CSV records + summary
    ablate           the four-variant sweep of one config, deltas vs std
    bias inverse     Monte Carlo inverse-bias sweep over m
    bias coupling    same-batch vs cross-fit coupling covariance z-scores
    bias jackknife   jackknife residual sweep over m
    bounds           convergence bound calculators

Exit codes: 0 success, 2 config error, 3 every-seed-poisoned outcome.
"""

from __future__ import annotations

import argparse
import configparser
import os
import sys

from . import biaslab
from .errors import BcoptError, ConfigurationError, InsufficientSignalError
from .harness import header_lines, parse_config, run, run_ablation

BIAS_COLUMNS = "experiment,estimator,m,bias,stderr,slope,slope_ci_lo,slope_ci_hi"

_DISTRIBUTIONS = {
    "lognormal": (biaslab.LogNormal, (("mu", float, "0.0"), ("sigma", float, "0.25"))),
    "two_point": (biaslab.TwoPoint, (("lo", float, "0.5"), ("hi", float, "1.5"))),
    "gamma": (biaslab.Gamma, (("shape", float, "4.0"), ("scale", float, "1.0"))),
    "point_mass": (biaslab.PointMass, (("value", float, "1.0"),)),
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except BcoptError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bcopt")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="INI config path")
        p.add_argument("--out", default=None,
                       help="output directory (defaults to the config's run.out)")
        p.add_argument("--seed", default=None, help="comma-separated seed override")
        p.add_argument("--steps", type=int, default=None, help="step count override")
        p.add_argument("--quiet", action="store_true")

    p_train = sub.add_parser("train", help="run one training config")
    common(p_train)
    p_train.set_defaults(handler=_cmd_train)

    p_ablate = sub.add_parser("ablate", help="four-variant ablation of one config")
    common(p_ablate)
    p_ablate.set_defaults(handler=_cmd_ablate)

    p_bias = sub.add_parser("bias", help="Monte Carlo bias experiments")
    bias_sub = p_bias.add_subparsers(dest="experiment", required=True)
    for name, handler in (
        ("inverse", _cmd_bias_inverse),
        ("coupling", _cmd_bias_coupling),
        ("jackknife", _cmd_bias_jackknife),
    ):
        p = bias_sub.add_parser(name)
        common(p)
        p.set_defaults(handler=handler)

    p_bounds = sub.add_parser("bounds", help="convergence bound calculators")
    common(p_bounds)
    p_bounds.set_defaults(handler=_cmd_bounds)
    return parser


def _apply_overrides(cfg, args):
    from dataclasses import replace

    if args.seed is not None:
        seeds = tuple(int(s) for s in args.seed.replace(",", " ").split())
        cfg = replace(cfg, seeds=seeds).validate()
    if args.steps is not None:
        cfg = replace(cfg, steps=args.steps, final_k=min(cfg.final_k, args.steps)).validate()
    return cfg


def _cmd_train(args) -> int:
    cfg, echo = parse_config(args.config)
    cfg = _apply_overrides(cfg, args)
    echo["run.seeds"] = " ".join(str(s) for s in cfg.seeds)
    echo["run.steps"] = str(cfg.steps)
    return run(cfg, echo, args.out or cfg.out, quiet=args.quiet)


def _cmd_ablate(args) -> int:
    cfg, echo = parse_config(args.config)
    cfg = _apply_overrides(cfg, args)
    echo["run.seeds"] = " ".join(str(s) for s in cfg.seeds)
    echo["run.steps"] = str(cfg.steps)
    return run_ablation(cfg, echo, args.out or cfg.out, quiet=args.quiet)


# ---------------------------------------------------------------------------
# bias experiment configs


def _read_ini(path: str, section: str, defaults: dict) -> dict:
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise ConfigurationError(f"config file not found: {path}")
    values = dict(defaults)
    if parser.has_section(section):
        for key, value in parser.items(section):
            if key not in values:
                raise ConfigurationError(f"{section}.{key}: unknown key")
            values[key] = value
    return values


def _parse_distribution(values: dict):
    kind = values["distribution"].strip().lower()
    if kind not in _DISTRIBUTIONS:
        raise ConfigurationError(
            f"bias.distribution: unknown distribution {kind!r} "
            f"(valid: {sorted(_DISTRIBUTIONS)})"
        )
    cls, params = _DISTRIBUTIONS[kind]
    kwargs = {}
    for name, typ, _default in params:
        raw = values[name]
        try:
            kwargs[name] = typ(raw)
        except ValueError:
            raise ConfigurationError(f"bias.{name}: cannot parse {raw!r}")
    return cls(**kwargs)


_BIAS_DEFAULTS = {
    "distribution": "lognormal",
    "mu": "0.0", "sigma": "0.25", "lo": "0.5", "hi": "1.5",
    "shape": "4.0", "scale": "1.0", "value": "1.0",
    "ms": "8 16 32 64 128 256",
    "replicates": "200000",
    "damping": "0.0",
    "estimators": "uncorrected delta",
    "seed": "0",
}


def _bias_experiments(args, forced_estimator=None):
    values = _read_ini(args.config, "bias", _BIAS_DEFAULTS)
    dist = _parse_distribution(values)
    ms = tuple(int(m) for m in values["ms"].replace(",", " ").split())
    estimators = (
        [forced_estimator]
        if forced_estimator
        else values["estimators"].replace(",", " ").split()
    )
    for est in estimators:
        yield values, biaslab.BiasExperiment(
            distribution=dist,
            ms=ms,
            replicates=int(values["replicates"]),
            estimator=est,
            damping=float(values["damping"]),
            seed=int(values["seed"]),
        )


def _fit_or_none(points):
    try:
        return biaslab.fit_loglog_slope(points)
    except InsufficientSignalError:
        return None


def _write_bias_csv(path, rows, echo):
    lines = header_lines(echo)
    lines.append(BIAS_COLUMNS)
    lines.extend(rows)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _bias_rows(name, estimator, points, fit):
    slope = repr(fit.slope) if fit else ""
    lo = repr(fit.ci_lo) if fit else ""
    hi = repr(fit.ci_hi) if fit else ""
    for p in points:
        yield (
            f"{name},{estimator},{p.m},{repr(p.bias)},{repr(p.stderr)},"
            f"{slope},{lo},{hi}"
        )


def _cmd_bias_inverse(args) -> int:
    out = args.out or "out"
    os.makedirs(out, exist_ok=True)
    rows, echo = [], {}
    for values, exp in _bias_experiments(args):
        points = biaslab.mc_inverse_bias(exp)
        fit = _fit_or_none(points)
        rows.extend(_bias_rows("inverse", exp.estimator, points, fit))
        echo = {f"bias.{k}": v for k, v in values.items()}
        if not args.quiet:
            tag = f"slope {fit.slope:.3f}" if fit else "slope n/a (noise floor)"
            print(f"[bias inverse] {exp.estimator}: {tag}")
    _write_bias_csv(os.path.join(out, "inverse_bias.csv"), rows, echo)
    return 0


def _cmd_bias_jackknife(args) -> int:
    out = args.out or "out"
    os.makedirs(out, exist_ok=True)
    rows, echo = [], {}
    for values, exp in _bias_experiments(args, forced_estimator="jackknife"):
        points = biaslab.mc_inverse_bias(exp)
        fit = _fit_or_none(points)
        rows.extend(_bias_rows("jackknife_residual", "jackknife", points, fit))
        echo = {f"bias.{k}": v for k, v in values.items()}
        if not args.quiet:
            tag = f"slope {fit.slope:.3f}" if fit else "slope n/a (noise floor)"
            print(f"[bias jackknife] {tag}")
    _write_bias_csv(os.path.join(out, "jackknife_bias.csv"), rows, echo)
    return 0


_COUPLING_DEFAULTS = {
    "dim": "10", "batch_size": "8", "replicates": "10000", "damping": "0.1",
    "sigma0": "0.5", "kappa": "3.0", "gradient_coupling": "0.0",
    "tail_df": "inf", "offset": "1.0", "modes": "same_batch cross_fit",
    "seed": "0",
}


def _cmd_bias_coupling(args) -> int:
    from .problems import NoisyQuadratic

    values = _read_ini(args.config, "coupling", _COUPLING_DEFAULTS)
    out = args.out or "out"
    os.makedirs(out, exist_ok=True)
    dim = int(values["dim"])
    task = NoisyQuadratic.heteroscedastic(
        dim=dim,
        sigma0=float(values["sigma0"]),
        kappa=float(values["kappa"]),
        gradient_coupling=float(values["gradient_coupling"]),
        tail_df=float(values["tail_df"]),
    )
    params = task.theta_star + float(values["offset"])
    echo = {f"coupling.{k}": v for k, v in values.items()}
    rows = []
    for mode in values["modes"].replace(",", " ").split():
        result = biaslab.mc_coupling_covariance(
            task, params,
            batch_size=int(values["batch_size"]),
            mode=mode,
            replicates=int(values["replicates"]),
            damping=float(values["damping"]),
            seed=int(values["seed"]),
        )
        echo[f"coupling.max_abs_z.{mode}"] = repr(result.max_abs_z())
        for k in range(dim):
            rows.append(
                f"coupling_{mode},coordinate_{k},{values['batch_size']},"
                f"{repr(float(result.covariance[k]))},{repr(float(result.stderr[k]))},,,"
            )
        if not args.quiet:
            print(f"[bias coupling] {mode}: max |z| = {result.max_abs_z():.2f}")
    _write_bias_csv(os.path.join(out, "coupling.csv"), rows, echo)
    return 0


_BOUNDS_DEFAULTS = {
    "smoothness": "1.0", "precond_min": "1.0", "precond_max": "1.0",
    "bias_ratio": "0.0", "noise_var": "0.0", "pl_constant": "1.0",
    "step_size": "0.5", "initial_gap": "1.0", "steps": "100",
}


def _cmd_bounds(args) -> int:
    values = _read_ini(args.config, "bounds", _BOUNDS_DEFAULTS)
    out = args.out or "out"
    os.makedirs(out, exist_ok=True)
    params = biaslab.BoundParams(
        smoothness=float(values["smoothness"]),
        precond_min=float(values["precond_min"]),
        precond_max=float(values["precond_max"]),
        bias_ratio=float(values["bias_ratio"]),
        noise_var=float(values["noise_var"]),
        pl_constant=float(values["pl_constant"]),
        step_size=float(values["step_size"]),
        initial_gap=float(values["initial_gap"]),
    )
    steps = int(values["steps"])
    trajectory, c = biaslab.pl_trajectory_bound(params, steps)
    stationarity = biaslab.stationarity_bound(params, steps)
    echo = {f"bounds.{k}": v for k, v in values.items()}
    lines = header_lines(echo)
    lines.append("quantity,step,value")
    lines.append(f"contraction_coefficient,,{repr(float(c))}")
    lines.append(f"max_admissible_step,,{repr(biaslab.max_admissible_step(params))}")
    lines.append(f"stationarity_bound,{steps},{repr(float(stationarity))}")
    for t, value in enumerate(trajectory):
        lines.append(f"trajectory_bound,{t},{repr(float(value))}")
    path = os.path.join(out, "bounds.csv")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    if not args.quiet:
        print(f"[bounds] c={c:.6g}, stationarity bound {stationarity:.6g}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
