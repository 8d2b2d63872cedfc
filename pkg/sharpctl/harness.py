"""
Experiment orchestration: train one network to a loss threshold, measure it,
and sweep a configuration axis over seeds into correlation reports.
"""

import itertools
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch

from sharpctl.analysis import generalization_gap, kendall_tau
from sharpctl.autodiff import Batch, ParamVector, forward
from sharpctl.config import DEFAULT_CONFIG, Config
from sharpctl.data import DatasetSpec, inject_data_noise, inject_label_noise, load_splits
from sharpctl.db import init_db, insert_run
from sharpctl.errors import ConfigError, DivergenceError, NumericError, UndefinedCorrelationError
from sharpctl.models import Model, balance, build_mlp
from sharpctl.optimizers import (
    LpfConfig,
    OptimizerState,
    StepLog,
    entropy_sgd_step,
    lpf_sgd_step,
    msgd_step,
    sam_step,
)
from sharpctl.reports import (
    CORRELATION_COLUMNS,
    Manifest,
    check_format,
    write_run_reports,
    write_table,
)
from sharpctl.schedules import scoping_schedule, step_lr
from sharpctl.sharpness import MeasureReport, MeasureSettings, compute_measures
from sharpctl.utils import SeededStream, ensure_dir, get_logger, np_substream
from sharpctl.worker import run_tasks

logger = get_logger(__name__)

OPTIMIZERS = ("msgd", "lpf_sgd", "sam", "entropy_sgd")
AXES = ("hyperparam", "label_noise", "data_noise", "width")
AXIS_KEYS = {
    "label_noise": "dataset.label_noise",
    "data_noise": "dataset.data_noise",
    "width": "model.hidden",
}
DIVERGENCE_LOSS = 1e6

# keys of the per-run sub-streams
_SHUFFLE_KEY, _LPF_KEY, _ENTROPY_KEY = 100, 200, 300


@dataclass(frozen=True)
class ExperimentConfig:
    """Typed view of a Config for one training run."""

    dataset: DatasetSpec
    label_noise: float
    data_noise: float
    hidden: Tuple[int, ...]
    activation: str
    optimizer: str
    lr: float
    momentum: float
    weight_decay: float
    batch_size: int
    lr_milestones: Tuple[int, ...]
    lr_decay: float
    lpf_gamma0: float
    lpf_alpha: float
    lpf_splits: int
    lpf_covariance: str
    sam_rho: float
    entropy_steps: int
    entropy_gamma0: float
    entropy_gamma1: float
    entropy_eta: float
    entropy_noise: float
    entropy_alpha: float
    entropy_lr_multiplier: float
    loss_threshold: float
    max_epochs: int
    measures: Tuple[str, ...]
    measure_settings: MeasureSettings
    seeds: Tuple[int, ...]
    output_dir: Path
    threads: int
    config_hash: str

    def __post_init__(self) -> None:
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer.name must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.loss_threshold <= 0:
            raise ConfigError(f"stop.loss_threshold must be > 0, got {self.loss_threshold}")
        if self.max_epochs < 0:
            raise ConfigError(f"stop.max_epochs must be >= 0, got {self.max_epochs}")
        if not self.seeds:
            raise ConfigError("run.seeds must name at least one seed")
        if self.batch_size < 1:
            raise ConfigError(f"optimizer.batch_size must be >= 1, got {self.batch_size}")

    @classmethod
    def from_config(cls, config: Config) -> "ExperimentConfig":
        return cls(
            dataset=DatasetSpec.from_config(config),
            label_noise=config.get_float("dataset.label_noise"),
            data_noise=config.get_float("dataset.data_noise"),
            hidden=tuple(config.get_int_list("model.hidden")),
            activation=config.get("model.activation"),
            optimizer=config.get("optimizer.name"),
            lr=config.get_float("optimizer.lr"),
            momentum=config.get_float("optimizer.momentum"),
            weight_decay=config.get_float("optimizer.weight_decay"),
            batch_size=config.get_int("optimizer.batch_size"),
            lr_milestones=tuple(config.get_int_list("optimizer.lr_milestones")),
            lr_decay=config.get_float("optimizer.lr_decay"),
            lpf_gamma0=config.get_float("lpf.gamma0"),
            lpf_alpha=config.get_float("lpf.alpha"),
            lpf_splits=config.get_int("lpf.mc_samples"),
            lpf_covariance=config.get("lpf.covariance"),
            sam_rho=config.get_float("sam.rho"),
            entropy_steps=config.get_int("entropy.langevin_steps"),
            entropy_gamma0=config.get_float("entropy.gamma0"),
            entropy_gamma1=config.get_float("entropy.gamma1"),
            entropy_eta=config.get_float("entropy.eta"),
            entropy_noise=config.get_float("entropy.noise"),
            entropy_alpha=config.get_float("entropy.alpha_avg"),
            entropy_lr_multiplier=config.get_float("entropy.outer_lr_multiplier"),
            loss_threshold=config.get_float("stop.loss_threshold"),
            max_epochs=config.get_int("stop.max_epochs"),
            measures=tuple(config.get_list("measures.names")),
            measure_settings=MeasureSettings.from_config(config),
            seeds=tuple(config.get_int_list("run.seeds")),
            output_dir=Path(config.get("run.output_dir") or "runs"),
            threads=config.get_int("run.threads"),
            config_hash=config.fingerprint(),
        )


@dataclass
class RunRecord:
    """Outcome of one training run; ``converged`` decides whether it enters correlations."""

    run_id: str
    config_hash: str
    seed: int
    converged: bool
    reason: str
    final_train_loss: float
    train_error: float
    test_error: float
    epochs: int
    measures: List[MeasureReport] = field(default_factory=list)
    sweep_value: str = ""
    step_log_path: str = ""
    step_log: Optional[pd.DataFrame] = field(default=None, repr=False, compare=False)
    model: Optional[Model] = field(default=None, repr=False, compare=False)
    params: Optional[ParamVector] = field(default=None, repr=False, compare=False)

    @property
    def state(self) -> str:
        return "converged" if self.converged else "discarded"

    @property
    def gap(self) -> float:
        return generalization_gap(self.train_error, self.test_error)

    def measure_values(self) -> Dict[str, float]:
        return {report.name: report.value for report in self.measures}

    def to_row(self) -> Dict[str, object]:
        return {
            "run_id": self.run_id,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "sweep_value": self.sweep_value,
            "state": self.state,
            "reason": self.reason,
            "final_train_loss": self.final_train_loss,
            "train_error": self.train_error,
            "test_error": self.test_error,
            "gap": self.test_error - self.train_error,
            "epochs": self.epochs,
            "step_log_path": self.step_log_path,
        }


def error_rate(model: Model, params: ParamVector, batch: Batch) -> float:
    """Fraction of misclassified examples."""
    probs = forward(model, params, batch).per_example_probs
    return float((probs.argmax(dim=1) != batch.labels).double().mean())


def _epoch_batches(train: Batch, batch_size: int, seed: int, epoch: int) -> List[Batch]:
    """Full permutation keyed by (seed, epoch) cut into near-equal batches."""
    order = np_substream(seed, _SHUFFLE_KEY, epoch).permutation(train.size)
    parts = max(1, math.ceil(train.size / batch_size))
    return [train.subset(torch.from_numpy(index)) for index in np.array_split(order, parts)]


def prepare_data(cfg: ExperimentConfig, seed: int) -> Tuple[Batch, Batch, str]:
    """Train batch, test batch and dataset id with the noise protocols applied to training data."""
    train, test = load_splits(cfg.dataset)
    if cfg.label_noise:
        train = inject_label_noise(train, cfg.label_noise, seed)
    if cfg.data_noise:
        train = inject_data_noise(train, cfg.data_noise, seed)
    return train.as_batch(), test.as_batch(), train.dataset_id


def _make_stepper(
    cfg: ExperimentConfig,
    model: Model,
    seed: int,
    steps_per_epoch: int,
    min_batch: int,
) -> Callable[[OptimizerState, Batch, Callable[[], Batch], StepLog], OptimizerState]:
    if cfg.optimizer == "msgd":
        return lambda state, batch, _, log: msgd_step(state, model, batch, log)
    if cfg.optimizer == "sam":
        return lambda state, batch, _, log: sam_step(state, model, batch, cfg.sam_rho, log)
    if cfg.optimizer == "lpf_sgd":
        if cfg.lpf_splits > min_batch:
            raise ConfigError(f"lpf.mc_samples={cfg.lpf_splits} exceeds the smallest batch ({min_batch})")
        lpf = LpfConfig(
            gamma0=cfg.lpf_gamma0,
            alpha=cfg.lpf_alpha,
            M=cfg.lpf_splits,
            T_total=max(1, cfg.max_epochs * steps_per_epoch),
            covariance=cfg.lpf_covariance,
        )
        stream = SeededStream(seed, (_LPF_KEY,))
        return lambda state, batch, _, log: lpf_sgd_step(state, model, batch, lpf, stream, log)

    stream = SeededStream(seed, (_ENTROPY_KEY,))

    def entropy(
        state: OptimizerState, _: Batch, next_batch: Callable[[], Batch], log: StepLog
    ) -> OptimizerState:
        gamma = scoping_schedule(state.step, cfg.entropy_gamma0, cfg.entropy_gamma1)
        return entropy_sgd_step(
            state,
            model,
            next_batch,
            cfg.entropy_steps,
            gamma,
            cfg.entropy_eta,
            cfg.entropy_noise,
            cfg.entropy_alpha,
            stream,
            cfg.entropy_lr_multiplier,
            log,
        )

    return entropy


def train_to_threshold(
    cfg: ExperimentConfig,
    seed: int,
    sweep_value: str = "",
    keep_params: bool = False,
) -> RunRecord:
    """
    Train until the full training loss reaches cfg.loss_threshold or
    cfg.max_epochs epochs pass, then balance the network and compute the
    configured measures on the training data.

    Divergence (loss above 1e6 or non-finite) ends the run as discarded with
    the reason recorded; no measures are computed for discarded runs.

    Args:
        cfg: Experiment configuration.
        seed: Run seed (initialization, shuffling, noise and all MC draws).
        sweep_value: Label of the sweep point this run belongs to.
        keep_params: Attach the model and balanced parameters to the record.
    """
    run_id = f"{cfg.config_hash}-s{seed}"
    torch.set_num_threads(max(1, cfg.threads))
    train, test, dataset_id = prepare_data(cfg, seed)
    sizes = (train.inputs.shape[1], *cfg.hidden, cfg.dataset.classes)
    model, initial = build_mlp(sizes, seed, cfg.activation)
    state = OptimizerState(initial, cfg.lr, cfg.momentum, cfg.weight_decay)
    log = StepLog()
    logger.info(f"Run {run_id}: {cfg.optimizer} on {dataset_id}, {model.num_params()} parameters.")

    steps_per_epoch = max(1, math.ceil(train.size / cfg.batch_size))
    stepper = _make_stepper(cfg, model, seed, steps_per_epoch, train.size // steps_per_epoch)
    converged, reason, epochs = False, "max_epochs reached", 0
    train_loss = forward(model, state.params, train).loss
    try:
        for epoch in range(cfg.max_epochs):
            state = replace(state, lr=step_lr(cfg.lr, epoch, cfg.lr_milestones, cfg.lr_decay))
            batches = _epoch_batches(train, cfg.batch_size, seed, epoch)
            if cfg.optimizer == "entropy_sgd":
                source = itertools.cycle(batches)
                outer_steps = math.ceil(len(batches) / cfg.entropy_steps)
                for _ in range(outer_steps):
                    state = stepper(state, batches[0], lambda: next(source), log)
            else:
                for batch in batches:
                    state = stepper(state, batch, lambda: batch, log)
            epochs = epoch + 1
            train_loss = forward(model, state.params, train).loss
            logger.debug(f"Run {run_id} epoch {epochs}: train loss {train_loss:.6f}")
            if not math.isfinite(train_loss) or train_loss > DIVERGENCE_LOSS:
                raise DivergenceError(f"training loss {train_loss:.3e} diverged at epoch {epochs}")
            if train_loss <= cfg.loss_threshold:
                converged, reason = True, ""
                break
    except NumericError as e:
        logger.warning(f"Run {run_id} discarded: {e}")
        return RunRecord(
            run_id=run_id,
            config_hash=cfg.config_hash,
            seed=seed,
            converged=False,
            reason=f"diverged: {e}",
            final_train_loss=math.nan,
            train_error=1.0,
            test_error=1.0,
            epochs=epochs,
            sweep_value=sweep_value,
            step_log=log.to_frame(),
        )

    params = state.params
    train_error = error_rate(model, params, train)
    test_error = error_rate(model, params, test)
    measures: List[MeasureReport] = []
    if converged:
        params, report = balance(model, params)
        logger.info(
            f"Run {run_id} converged after {epochs} epochs "
            f"(balance deviation {report.max_output_deviation:.2e})."
        )
        measures = compute_measures(
            model,
            params,
            train,
            cfg.measures,
            cfg.measure_settings,
            seed,
            initial_params=initial,
            dataset_id=dataset_id,
            skip_failures=True,
        )
    else:
        logger.info(
            f"Run {run_id} discarded: loss {train_loss:.4f} above "
            f"{cfg.loss_threshold} after {epochs} epochs."
        )
    return RunRecord(
        run_id=run_id,
        config_hash=cfg.config_hash,
        seed=seed,
        converged=converged,
        reason=reason,
        final_train_loss=train_loss,
        train_error=train_error,
        test_error=test_error,
        epochs=epochs,
        measures=measures,
        sweep_value=sweep_value,
        step_log=log.to_frame(),
        model=model if keep_params else None,
        params=params if keep_params else None,
    )


def axis_key(config: Config, axis: str) -> str:
    """Config key swept by ``axis``."""
    if axis not in AXES:
        raise ConfigError(f"sweep axis must be one of {AXES}, got {axis!r}")
    if axis != "hyperparam":
        return AXIS_KEYS[axis]
    key = config.get("sweep.key") or ""
    if key not in DEFAULT_CONFIG or key.startswith(("sweep.", "run.")):
        raise ConfigError(f"sweep.key {key!r} is not a sweepable configuration key")
    return key


def point_config(config: Config, axis: str, value: str) -> Config:
    """Copy of ``config`` with the axis key set to ``value``."""
    point = config.copy()
    key = axis_key(config, axis)
    if axis == "width":
        layers = max(1, len(config.get_int_list("model.hidden")))
        point.set(key, ",".join([str(int(value))] * layers))
    else:
        point.set(key, value)
    return point


def sweep_tasks(config: Config, axis: str) -> List[Tuple[Config, int, str]]:
    """(point config, seed, sweep value) for every value x seed, values outermost."""
    values = config.get_list("sweep.values")
    if not values:
        raise ConfigError("sweep.values must list at least one value")
    seeds = config.get_int_list("run.seeds")
    if not seeds:
        raise ConfigError("run.seeds must name at least one seed")
    return [(point_config(config, axis, value), seed, value) for value in values for seed in seeds]


def _as_number(value: str) -> Optional[float]:
    try:
        return float(value)
    except ValueError:
        return None


def point_means(records: Sequence[RunRecord]) -> pd.DataFrame:
    """
    Seed averages per sweep value over converged runs only: one row per
    value with the mean gap and the mean of every measure.
    """
    rows = []
    for record in records:
        if not record.converged:
            continue
        row = {"sweep_value": record.sweep_value, "gap": record.gap}
        row.update(record.measure_values())
        rows.append(row)
    if not rows:
        return pd.DataFrame(columns=["sweep_value", "gap"])
    frame = pd.DataFrame(rows)
    order = list(dict.fromkeys(frame["sweep_value"]))
    means = frame.groupby("sweep_value", sort=False).mean()
    return means.loc[order].reset_index()


def correlate(records: Sequence[RunRecord], axis: str, measures: Sequence[str]) -> List[Dict[str, object]]:
    """
    Kendall tau between the seed-averaged generalization gap and every
    measure (plus the swept value itself) across sweep points.

    Points with fewer than two converged values are skipped with a warning.
    """
    means = point_means(records)
    if len(means) < 2:
        logger.warning(f"Correlation on axis {axis} skipped: {len(means)} converged sweep point(s).")
        return []
    rows = []
    numeric = [_as_number(v) for v in means["sweep_value"]]
    columns = [("sweep_value", numeric)] if all(v is not None for v in numeric) else []
    columns += [(name, list(means[name])) for name in measures if name in means.columns]
    for name, values in columns:
        pairs = [(x, g) for x, g in zip(values, means["gap"]) if x is not None and not pd.isna(x)]
        if len(pairs) < 2:
            logger.warning(f"Correlation of {name} on axis {axis} skipped: {len(pairs)} point(s).")
            continue
        try:
            result = kendall_tau([p[0] for p in pairs], [p[1] for p in pairs])
        except UndefinedCorrelationError as e:
            logger.warning(f"Correlation of {name} on axis {axis} skipped: {e}")
            continue
        rows.append(
            {"measure": name, "axis": axis, "tau": result.tau, "ci95": result.ci95_halfwidth, "n": result.n}
        )
    return rows


def _mean(values: Sequence[float]) -> float:
    return float(np.mean(values)) if values else math.nan


def sweep_summary(records: Sequence[RunRecord]) -> List[Dict[str, object]]:
    """Per sweep value: run counts and mean errors over converged runs."""
    rows = []
    for value in dict.fromkeys(record.sweep_value for record in records):
        point = [r for r in records if r.sweep_value == value]
        converged = [r for r in point if r.converged]
        rows.append(
            {
                "sweep_value": value,
                "runs": len(point),
                "converged": len(converged),
                "mean_train_error": _mean([r.train_error for r in converged]),
                "mean_test_error": _mean([r.test_error for r in converged]),
                "mean_gap": _mean([r.gap for r in converged]),
            }
        )
    return rows


@dataclass
class SweepResult:
    """Everything a sweep produced, as returned to the CLI."""

    axis: str
    records: List[RunRecord]
    correlation: List[Dict[str, object]]
    summary: List[Dict[str, object]]
    manifest_path: Path

    @property
    def converged(self) -> int:
        return sum(1 for record in self.records if record.converged)


def record_runs(records: Sequence[RunRecord], output_dir: Path, fmt: str, manifest: Manifest) -> None:
    """Write run reports and register every run in the output directory's registry."""
    write_run_reports(records, output_dir, fmt, manifest)
    init_db(output_dir)
    for record in records:
        insert_run(output_dir, record)
    manifest.extra["runs"] = [record.run_id for record in records]


def run_sweep(
    config: Config,
    axis: Optional[str] = None,
    output_dir: Optional[Path] = None,
    workers: Optional[int] = None,
    fmt: str = "csv",
) -> SweepResult:
    """
    Train every sweep value x seed, then emit runs, measures, step logs,
    per-value summaries and the per-axis Kendall tau table.

    Runs may execute in parallel; this process is the only writer of report
    files and of the run registry.

    Args:
        config: Base configuration; ``sweep.values`` enumerates the axis.
        axis: Axis to sweep (defaults to ``sweep.axis``).
        output_dir: Report directory (defaults to ``run.output_dir``).
        workers: Worker processes (defaults to ``run.workers``).
        fmt: ``csv`` or ``json``.
    """
    check_format(fmt)
    axis = axis or config.get("sweep.axis") or "hyperparam"
    output_dir = ensure_dir(Path(output_dir or config.get("run.output_dir") or "runs"))
    workers = workers if workers is not None else config.get_int("run.workers")
    tasks = sweep_tasks(config, axis)
    measures = ExperimentConfig.from_config(tasks[0][0]).measures
    logger.info(f"Sweep over {axis} ({axis_key(config, axis)}): {len(tasks)} runs into {output_dir}.")

    records = run_tasks(tasks, workers)

    manifest = Manifest(output_dir, "sweep")
    record_runs(records, output_dir, fmt, manifest)
    summary = sweep_summary(records)
    manifest.add("sweep_summary", write_table(summary, output_dir / "sweep_summary", fmt))
    correlation = correlate(records, axis, measures)
    manifest.add(
        "correlation",
        write_table(correlation, output_dir / "correlation", fmt, CORRELATION_COLUMNS),
    )
    manifest.extra["axis"] = axis
    manifest_path = manifest.write()
    result = SweepResult(axis, list(records), correlation, summary, manifest_path)
    logger.info(f"Sweep finished: {result.converged}/{len(records)} runs converged.")
    return result
