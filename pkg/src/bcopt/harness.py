"""Run orchestration: config parsing, training loops, CSV records.

Configs are INI files (key = value under nested sections), parsed with
every default filled in and echoed back into a comment header so each CSV
is self-describing. One step-record CSV is written per (run, seed) and a
summary CSV per invocation; identical (config, seeds) reruns produce
byte-identical files.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigurationError, PoisonedStepError
from .optimizers import (
    AdamWState,
    LooConfig,
    ShampooState,
    SophiaState,
    Variant,
    adamw_loo_jensen_step,
    adamw_step,
    apply_update,
    clip_global_norm,
    lr_schedule,
    shampoo_step,
    sophia_gnb_sample,
    sophia_step,
    split_batch,
)
from .problems import LogisticTask, NoisyQuadratic, TwoLayerMlpTask

SCHEMA_VERSION = "bcopt-csv v1"

STEP_COLUMNS = (
    "run", "seed", "step", "lr", "train_loss", "eval_loss", "update_norm",
    "correction_l2", "clamp_count", "denom_mean", "denom_var", "poisoned",
)

SUMMARY_COLUMNS = (
    "run", "final_k", "mean_final_k_train_loss", "final_eval_loss",
    "delta_train_vs_baseline", "delta_eval_vs_baseline", "baseline",
)

FAMILIES = ("adamw", "adamw_loo", "sophia", "shampoo")
TASKS = ("quadratic", "logistic", "mlp")


@dataclass
class StepRecord:
    run: str
    seed: int
    step: int
    lr: float
    train_loss: float
    eval_loss: float | None
    update_norm: float
    correction_l2: float
    clamp_count: int
    denom_mean: float
    denom_var: float
    poisoned: bool = False


@dataclass
class SummaryRow:
    run: str
    final_k: int
    mean_final_k_train_loss: float
    final_eval_loss: float
    delta_train_vs_baseline: float | None
    delta_eval_vs_baseline: float | None
    baseline: str


@dataclass
class RunConfig:
    name: str = "run"
    task: str = "quadratic"
    optimizer: str = "adamw"
    variant: Variant = Variant.STD
    steps: int = 100
    batch_size: int = 32
    microbatches: int = 8
    seeds: tuple = (0,)
    eval_every: int = 10
    final_k: int = 10
    task_params: dict = field(default_factory=dict)
    opt_params: dict = field(default_factory=dict)
    lr: float = 0.01
    warmup: int = 0
    floor_fraction: float = 1.0
    grad_clip: float = 1.0
    init_spread: float = 1.0
    # "paired": split variants draw a double batch so each group matches
    # batch_size (the protocol of the main corrected runs). "halved": split
    # the configured batch in two (the two-fold ablation protocol).
    group_size_policy: str = "paired"
    out: str = "out"

    def validate(self):
        if self.task not in TASKS:
            raise ConfigurationError(f"run.task: unknown task {self.task!r}")
        if self.optimizer not in FAMILIES:
            raise ConfigurationError(f"run.optimizer: unknown family {self.optimizer!r}")
        if self.steps < 1:
            raise ConfigurationError("run.steps: must be >= 1")
        if self.final_k > self.steps:
            raise ConfigurationError(
                f"run.final_k: {self.final_k} exceeds total steps {self.steps}"
            )
        if not self.seeds:
            raise ConfigurationError("run.seeds: need at least one seed")
        if any(s < 0 for s in self.seeds):
            raise ConfigurationError("run.seeds: seeds must be nonnegative")
        if self.optimizer == "shampoo" and self.task != "quadratic":
            raise ConfigurationError(
                "run.optimizer: shampoo runs only on the quadratic task "
                "(its flat parameter reshapes to a matrix)"
            )
        if self.group_size_policy not in ("paired", "halved"):
            raise ConfigurationError(
                f"run.group_size_policy: unknown policy {self.group_size_policy!r}"
            )
        return self


# ---------------------------------------------------------------------------
# config parsing


_DEFAULTS = {
    "run": {
        "name": "run", "task": "quadratic", "optimizer": "adamw",
        "variant": "std", "steps": "100", "batch_size": "32",
        "microbatches": "8", "seeds": "0", "eval_every": "10", "final_k": "10",
        "group_size_policy": "paired", "out": "out",
    },
    "task": {
        "dim": "20", "sigma0": "1.0", "kappa": "0.0",
        "hessian_min": "1.0", "hessian_max": "1.0",
        "gradient_coupling": "0.0", "tail_df": "inf", "init_spread": "1.0",
        "n": "256", "d_in": "16", "d_hidden": "32", "n_classes": "4",
        "data_seed": "0", "l2_reg": "0.0",
    },
    "optimizer": {
        "lr": "0.01", "beta1": "0.9", "beta2": "0.99", "eps": "1e-8",
        "weight_decay": "0.0", "clip": "0.0", "grad_clip": "1.0",
        "inverse_timing": "post_ema",
        "rho": "0.05", "batch_scale": "1.0", "hess_interval": "5",
        "clip_bound": "1.0",
        "damping": "1e-6", "eigen_every": "5", "rows": "0", "cols": "0",
        "cumulative": "false", "max_root": "0.0",
        "jensen": "true",
    },
    "schedule": {"warmup": "0", "floor_fraction": "1.0"},
}


def _coerce(section: str, key: str, raw: str, kind):
    try:
        if kind is bool:
            lowered = raw.strip().lower()
            if lowered in ("true", "1", "yes"):
                return True
            if lowered in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except (TypeError, ValueError):
        raise ConfigurationError(
            f"{section}.{key}: cannot parse {raw!r} as {kind.__name__}"
        )


def parse_config(path: str) -> tuple:
    """Parse an INI run config. Returns (RunConfig, echo dict) where the
    echo carries every resolved key for the CSV header."""
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigurationError(f"config file not found: {path}")
    resolved = {s: dict(defaults) for s, defaults in _DEFAULTS.items()}
    for section in parser.sections():
        if section not in resolved:
            raise ConfigurationError(f"unknown config section [{section}]")
        for key, value in parser.items(section):
            if key not in resolved[section]:
                raise ConfigurationError(f"{section}.{key}: unknown key")
            resolved[section][key] = value

    run = resolved["run"]
    sched = resolved["schedule"]
    opt = resolved["optimizer"]
    task = resolved["task"]
    seeds = tuple(
        _coerce("run", "seeds", s, int) for s in run["seeds"].replace(",", " ").split()
    )
    cfg = RunConfig(
        name=run["name"],
        task=run["task"],
        optimizer=run["optimizer"],
        variant=Variant.parse(run["variant"]),
        steps=_coerce("run", "steps", run["steps"], int),
        batch_size=_coerce("run", "batch_size", run["batch_size"], int),
        microbatches=_coerce("run", "microbatches", run["microbatches"], int),
        seeds=seeds,
        eval_every=_coerce("run", "eval_every", run["eval_every"], int),
        final_k=_coerce("run", "final_k", run["final_k"], int),
        task_params={k: v for k, v in task.items()},
        opt_params={k: v for k, v in opt.items()},
        lr=_coerce("optimizer", "lr", opt["lr"], float),
        warmup=_coerce("schedule", "warmup", sched["warmup"], int),
        floor_fraction=_coerce("schedule", "floor_fraction", sched["floor_fraction"], float),
        grad_clip=_coerce("optimizer", "grad_clip", opt["grad_clip"], float),
        init_spread=_coerce("task", "init_spread", task["init_spread"], float),
        group_size_policy=run["group_size_policy"],
        out=run["out"],
    ).validate()
    echo = {
        f"{section}.{key}": value
        for section, keys in resolved.items()
        for key, value in sorted(keys.items())
        if (section, key) != ("run", "out")  # keep outputs path-independent
    }
    return cfg, echo


# ---------------------------------------------------------------------------
# task and optimizer construction


def build_task(cfg: RunConfig):
    p = cfg.task_params
    get = lambda key, kind: _coerce("task", key, p[key], kind)
    if cfg.task == "quadratic":
        dim = get("dim", int)
        hessian = np.linspace(get("hessian_min", float), get("hessian_max", float), dim)
        scales = get("sigma0", float) * (1.0 + get("kappa", float) * np.arange(dim) / dim)
        return NoisyQuadratic(
            hessian=hessian,
            theta_star=np.zeros(dim),
            noise_scale=scales,
            gradient_coupling=get("gradient_coupling", float),
            tail_df=get("tail_df", float),
        )
    if cfg.task == "logistic":
        return LogisticTask.synthetic(
            n=get("n", int), dim=get("dim", int), seed=get("data_seed", int),
            l2_reg=get("l2_reg", float),
        )
    return TwoLayerMlpTask.synthetic(
        n=get("n", int), d_in=get("d_in", int), d_hidden=get("d_hidden", int),
        n_classes=get("n_classes", int), seed=get("data_seed", int),
    )


def _opt(cfg: RunConfig, key: str, kind):
    return _coerce("optimizer", key, cfg.opt_params[key], kind)


def build_optimizer_state(cfg: RunConfig, n_params: int):
    if cfg.optimizer in ("adamw", "adamw_loo"):
        return AdamWState.init(
            n_params,
            beta1=_opt(cfg, "beta1", float),
            beta2=_opt(cfg, "beta2", float),
            eps=_opt(cfg, "eps", float),
            weight_decay=_opt(cfg, "weight_decay", float),
            clip=_opt(cfg, "clip", float),
            inverse_timing=cfg.opt_params["inverse_timing"],
        )
    if cfg.optimizer == "sophia":
        return SophiaState.init(
            n_params,
            beta1=_opt(cfg, "beta1", float),
            beta2=_opt(cfg, "beta2", float),
            rho=_opt(cfg, "rho", float),
            batch_scale=_opt(cfg, "batch_scale", float),
            hess_interval=_opt(cfg, "hess_interval", int),
            clip_bound=_opt(cfg, "clip_bound", float),
            eps=_opt(cfg, "eps", float),
            weight_decay=_opt(cfg, "weight_decay", float),
            inverse_timing=cfg.opt_params["inverse_timing"],
        )
    rows, cols = _opt(cfg, "rows", int), _opt(cfg, "cols", int)
    if rows * cols != n_params:
        raise ConfigurationError(
            f"optimizer.rows/cols: {rows}x{cols} does not factor {n_params} parameters"
        )
    max_root = _opt(cfg, "max_root", float)
    return ShampooState.init(
        (rows, cols),
        beta1=_opt(cfg, "beta1", float),
        beta2=_opt(cfg, "beta2", float),
        damping=_opt(cfg, "damping", float),
        eigen_every=_opt(cfg, "eigen_every", int),
        cumulative=_opt(cfg, "cumulative", bool),
        clip=_opt(cfg, "clip", float),
        max_root=max_root if max_root > 0 else None,
        weight_decay=_opt(cfg, "weight_decay", float),
    )


# ---------------------------------------------------------------------------
# the training loop


def run_training(cfg: RunConfig, seed: int, task=None) -> list:
    """Train one seed. Returns the StepRecord list; a poisoned step stops
    the run with a flagged final record."""
    task = build_task(cfg) if task is None else task
    theta = task.initial_params(np.random.default_rng([seed, 101]), spread=cfg.init_spread)
    state = build_optimizer_state(cfg, task.n_params)
    weight_decay = _opt(cfg, "weight_decay", float)
    loo_cfg = None
    if cfg.optimizer == "adamw_loo":
        loo_cfg = LooConfig(m=cfg.microbatches, jensen_enabled=_opt(cfg, "jensen", bool))

    n_data = getattr(task, "n_examples", None)
    records = []
    for step in range(cfg.steps):
        lr = lr_schedule(step, cfg.steps, cfg.warmup, cfg.lr, cfg.floor_fraction)
        with np.errstate(over="ignore", invalid="ignore"):
            train_loss = task.loss(theta)
        if not np.isfinite(train_loss):
            records.append(_poisoned_record(cfg, seed, step, lr, train_loss))
            break
        scheduled = (step + 1) % cfg.eval_every == 0 or step == cfg.steps - 1

        # LOO folds span the whole batch; other variants follow the split
        # policy, with paired split variants drawing one batch per group.
        split_variant = Variant.STD if cfg.optimizer == "adamw_loo" else cfg.variant
        draw = cfg.batch_size
        if split_variant.split and cfg.group_size_policy == "paired":
            draw = 2 * cfg.batch_size
        if n_data is None:
            batch = np.arange(draw)
        else:
            batch_rng = np.random.default_rng([seed, step, 2])
            batch = batch_rng.choice(n_data, size=min(draw, n_data), replace=False)
        positions = np.arange(batch.size)
        split = split_batch(positions, split_variant, cfg.microbatches, step, seed)

        grad_rng = np.random.default_rng([seed, step, 1])
        with np.errstate(over="ignore", invalid="ignore"):
            rows = task.example_gradients(theta, batch, grad_rng)
        grad_a = clip_global_norm(rows[split.group_a].mean(axis=0), cfg.grad_clip)
        micro = np.stack([
            clip_global_norm(rows[mb].mean(axis=0), cfg.grad_clip)
            for mb in split.microbatches
        ])

        try:
            if cfg.optimizer == "adamw":
                result = adamw_step(state, grad_a, micro, cfg.variant)
            elif cfg.optimizer == "adamw_loo":
                result = adamw_loo_jensen_step(state, micro, loo_cfg)
            elif cfg.optimizer == "sophia":
                gnb = _sophia_curvature(cfg, state, task, theta, batch, split, rows, seed, step)
                result = sophia_step(state, grad_a, gnb, cfg.variant)
            else:
                result = _shampoo_flat_step(cfg, state, grad_a, micro)
            with np.errstate(over="ignore", invalid="ignore"):
                theta = apply_update(theta, result.update, lr, weight_decay)
            if not np.all(np.isfinite(theta)):
                raise PoisonedStepError("parameters left the finite range")
        except PoisonedStepError:
            records.append(_poisoned_record(cfg, seed, step, lr, train_loss))
            break

        records.append(StepRecord(
            run=cfg.name, seed=seed, step=step, lr=lr, train_loss=train_loss,
            eval_loss=task.loss(theta) if scheduled else None,
            update_norm=float(np.linalg.norm(result.update)),
            correction_l2=result.correction_l2,
            clamp_count=result.clamp_count,
            denom_mean=result.denom_mean,
            denom_var=result.denom_var,
        ))
    return records


def _poisoned_record(cfg, seed, step, lr, train_loss):
    return StepRecord(
        run=cfg.name, seed=seed, step=step, lr=lr, train_loss=train_loss,
        eval_loss=None, update_norm=float("nan"), correction_l2=float("nan"),
        clamp_count=0, denom_mean=float("nan"), denom_var=float("nan"),
        poisoned=True,
    )


def _sophia_curvature(cfg, state, task, theta, batch, split, rows, seed, step):
    """GNB microbatch gradients on curvature steps, None otherwise.

    Tasks without a predictive label distribution (the quadratic) fall back
    to plain microbatch gradients; their squares stand in for the sampled-
    label curvature proxy."""
    if not state.is_curvature_step():
        return None
    if hasattr(task, "gnb_gradient"):
        gnb_rng = np.random.default_rng([seed, step, 3])
        return np.stack([
            sophia_gnb_sample(task, theta, batch[mb], gnb_rng)
            for mb in split.microbatches
        ])
    return np.stack([rows[mb].mean(axis=0) for mb in split.microbatches])


def _shampoo_flat_step(cfg, state, grad_a, micro):
    shape = state.m.shape
    result = shampoo_step(
        state, grad_a.reshape(shape),
        micro.reshape(micro.shape[0], *shape), cfg.variant,
    )
    return replace(result, update=result.update.ravel())


# ---------------------------------------------------------------------------
# summaries


def summarize(run_records: dict, final_k: int, baseline: str) -> list:
    """Final-K mean train loss and final eval loss per run, with deltas
    against the named baseline run."""
    if baseline not in run_records:
        raise ConfigurationError(f"baseline run {baseline!r} not found")
    stats = {}
    for name, per_seed in run_records.items():
        train_means, finals = [], []
        for records in per_seed:
            if not records or any(r.poisoned for r in records):
                continue  # poisoned seeds are recorded but never summarized
            if final_k > len(records):
                raise ConfigurationError(
                    f"final_k {final_k} exceeds the {len(records)} recorded steps"
                )
            train_means.append(float(np.mean([r.train_loss for r in records[-final_k:]])))
            evals = [r.eval_loss for r in records if r.eval_loss is not None]
            finals.append(evals[-1] if evals else records[-1].train_loss)
        if not train_means:
            continue
        stats[name] = (float(np.mean(train_means)), float(np.mean(finals)))
    if baseline not in stats:
        raise ConfigurationError(f"baseline run {baseline!r} produced no usable records")
    base_train, base_eval = stats[baseline]
    rows = []
    for name, (train, ev) in stats.items():
        rows.append(SummaryRow(
            run=name, final_k=final_k,
            mean_final_k_train_loss=train, final_eval_loss=ev,
            delta_train_vs_baseline=train - base_train,
            delta_eval_vs_baseline=ev - base_eval,
            baseline=baseline,
        ))
    return rows


# ---------------------------------------------------------------------------
# CSV output


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def header_lines(echo: dict) -> list:
    lines = [f"# {SCHEMA_VERSION}"]
    lines.extend(f"# {key}={value}" for key, value in sorted(echo.items()))
    return lines


def write_records_csv(path, records, echo: dict) -> None:
    lines = header_lines(echo)
    lines.append(",".join(STEP_COLUMNS))
    for r in records:
        lines.append(",".join([
            r.run, str(r.seed), str(r.step), _fmt(r.lr), _fmt(r.train_loss),
            _fmt(r.eval_loss), _fmt(r.update_norm), _fmt(r.correction_l2),
            str(r.clamp_count), _fmt(r.denom_mean), _fmt(r.denom_var),
            _fmt(r.poisoned),
        ]))
    _write(path, lines)


def write_summary_csv(path, rows, echo: dict) -> None:
    lines = header_lines(echo)
    lines.append(",".join(SUMMARY_COLUMNS))
    for s in rows:
        lines.append(",".join([
            s.run, str(s.final_k), _fmt(s.mean_final_k_train_loss),
            _fmt(s.final_eval_loss), _fmt(s.delta_train_vs_baseline),
            _fmt(s.delta_eval_vs_baseline), s.baseline,
        ]))
    _write(path, lines)


def _write(path, lines) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# entry points used by the CLI


def run(cfg: RunConfig, echo: dict, out_dir, quiet: bool = False) -> int:
    """Train every seed of one config; write record CSVs and a summary.

    Returns 0 on success, 3 if every seed poisoned. A poisoned seed is
    recorded and skipped; sibling seeds still run and summarize.
    """
    import os

    os.makedirs(out_dir, exist_ok=True)
    task = build_task(cfg)
    per_seed = []
    any_clean = False
    for seed in cfg.seeds:
        records = run_training(cfg, seed, task=task)
        per_seed.append(records)
        poisoned = any(r.poisoned for r in records)
        any_clean = any_clean or not poisoned
        path = os.path.join(out_dir, f"{cfg.name}.seed{seed}.records.csv")
        write_records_csv(path, records, echo)
        if not quiet:
            tail = records[-1]
            status = "poisoned" if poisoned else f"loss {tail.train_loss:.6g}"
            print(f"[{cfg.name}] seed {seed}: {len(records)} steps, {status}")
    if not any_clean:
        return 3
    rows = summarize({cfg.name: per_seed}, cfg.final_k, baseline=cfg.name)
    write_summary_csv(os.path.join(out_dir, f"{cfg.name}.summary.csv"), rows, echo)
    return 0


def run_ablation(cfg: RunConfig, echo: dict, out_dir, quiet: bool = False) -> int:
    """Run all four variants of one config and summarize against std."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    task = build_task(cfg)
    run_records = {}
    any_clean = False
    for variant in Variant:
        vcfg = replace(cfg, variant=variant, name=f"{cfg.name}_{variant.value}")
        vecho = dict(echo)
        vecho["run.variant"] = variant.value
        vecho["run.name"] = vcfg.name
        per_seed = []
        for seed in vcfg.seeds:
            records = run_training(vcfg, seed, task=task)
            per_seed.append(records)
            poisoned = any(r.poisoned for r in records)
            any_clean = any_clean or not poisoned
            path = os.path.join(out_dir, f"{vcfg.name}.seed{seed}.records.csv")
            write_records_csv(path, records, vecho)
            if not quiet:
                print(f"[{vcfg.name}] seed {seed}: {len(records)} steps")
        run_records[vcfg.name] = per_seed
    if not any_clean:
        return 3
    rows = summarize(run_records, cfg.final_k, baseline=f"{cfg.name}_{Variant.STD.value}")
    write_summary_csv(os.path.join(out_dir, f"{cfg.name}.summary.csv"), rows, echo)
    return 0
