"""
Training steps: momentum SGD, LPF-SGD, SAM and Entropy-SGD.

Every step function takes an immutable OptimizerState and returns the next
one; all of them finish with the same heavy-ball update

    buffer <- momentum * buffer + (direction + weight_decay * params)
    params <- params - lr * buffer

so they differ only in how ``direction`` is computed.
"""

import time
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Tuple, Union

import pandas as pd
import torch

from sharpctl.autodiff import Batch, Objective, ParamVector, loss_and_grad
from sharpctl.errors import ArchitectureError, ConfigError, DegenerateFilterError, NumericError
from sharpctl.schedules import gamma_schedule
from sharpctl.utils import DTYPE, SeededStream, get_logger

logger = get_logger(__name__)

COVARIANCE_MODES = ("literal", "squared", "isotropic")
BatchSource = Union[Batch, Callable[[], Batch]]


@dataclass(frozen=True)
class OptimizerState:
    """Parameters plus the mutable-by-replacement optimizer state."""

    params: ParamVector
    lr: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    momentum_buffer: Optional[ParamVector] = None
    step: int = 0

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.momentum_buffer is not None and self.momentum_buffer.layout != self.params.layout:
            raise ArchitectureError("momentum buffer layout does not match params")


@dataclass(frozen=True)
class LpfConfig:
    """Filter radius schedule and Monte Carlo split count for LPF-SGD."""

    gamma0: float
    alpha: float
    M: int
    T_total: int
    covariance: str = "literal"

    def __post_init__(self) -> None:
        if self.gamma0 < 0 or self.alpha < 0:
            raise ConfigError("gamma0 and alpha must be non-negative")
        if self.M < 1 or self.T_total < 1:
            raise ConfigError("M and T_total must be positive")
        if self.covariance not in COVARIANCE_MODES:
            raise ConfigError(f"covariance must be one of {COVARIANCE_MODES}")


@dataclass(frozen=True)
class SigmaDiag:
    """Per-parameter filter norm, constant within each filter."""

    per_parameter_scale: torch.Tensor


@dataclass(frozen=True)
class StepRecord:
    step: int
    optimizer: str
    loss: float
    grad_norm: float
    gamma_t: float
    wallclock_ns: int
    note: str = ""


@dataclass
class StepLog:
    """Collects one record per optimizer step."""

    records: List[StepRecord] = field(default_factory=list)

    def append(self, record: StepRecord) -> None:
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def to_frame(self) -> pd.DataFrame:
        columns = ["step", "optimizer", "loss", "grad_norm", "gamma_t", "wallclock_ns", "note"]
        return pd.DataFrame([record.__dict__ for record in self.records], columns=columns)


def _apply_update(
    state: OptimizerState, direction: torch.Tensor, lr: Optional[float] = None
) -> OptimizerState:
    params = state.params.values
    d_p = direction + state.weight_decay * params if state.weight_decay else direction
    if state.momentum_buffer is None:
        buffer = d_p.clone()
    else:
        buffer = state.momentum * state.momentum_buffer.values + d_p
    step_lr = state.lr if lr is None else lr
    return replace(
        state,
        params=state.params.with_values(params - step_lr * buffer),
        momentum_buffer=state.params.with_values(buffer),
        step=state.step + 1,
    )


def _record(
    log: Optional[StepLog],
    state: OptimizerState,
    name: str,
    loss: float,
    direction: torch.Tensor,
    gamma_t: float,
    started: int,
    note: str = "",
) -> None:
    if log is None:
        return
    log.append(
        StepRecord(
            step=state.step,
            optimizer=name,
            loss=loss,
            grad_norm=float(direction.norm()),
            gamma_t=gamma_t,
            wallclock_ns=time.perf_counter_ns() - started,
            note=note,
        )
    )


def msgd_step(
    state: OptimizerState,
    model: Objective,
    batch: Batch,
    log: Optional[StepLog] = None,
) -> OptimizerState:
    """Heavy-ball SGD step with weight decay on one batch."""
    started = time.perf_counter_ns()
    loss, gradient = loss_and_grad(model, state.params, batch)
    _record(log, state, "msgd", loss, gradient.values, 0.0, started)
    return _apply_update(state, gradient.values)


def _filter_owner(params: ParamVector, k: int) -> Tuple[int, int]:
    """(layer, unit) of filter k, counting units through the bias blocks."""
    first = 0
    for entry in params.layout:
        if entry.role != "bias":
            continue
        if k < first + entry.length:
            return entry.layer, k - first
        first += entry.length
    return 0, k


def filter_sigma(params: ParamVector) -> SigmaDiag:
    """
    Broadcast every filter's L2 norm onto the filter's parameters.

    Raises:
        DegenerateFilterError: If some filter has zero norm.
    """
    if not params.filter_slices:
        raise ArchitectureError("parameters carry no filter structure")
    norms = params.filter_norms()
    zero = torch.nonzero(norms == 0)
    if zero.numel():
        layer, unit = _filter_owner(params, int(zero[0]))
        raise DegenerateFilterError(layer=layer, unit=unit)
    return SigmaDiag(per_parameter_scale=norms[params.filter_index()])


def perturbation_std(params: ParamVector, gamma: float, mode: str = "literal") -> torch.Tensor:
    """
    Per-coordinate standard deviation of the N(0, gamma * Sigma) kernel.

    ``literal`` treats the filter norms as variances (std = sqrt(gamma * norm)),
    ``squared`` uses squared norms (std = sqrt(gamma) * norm) and
    ``isotropic`` ignores the filters (std = sqrt(gamma)).
    """
    if mode not in COVARIANCE_MODES:
        raise ConfigError(f"covariance must be one of {COVARIANCE_MODES}")
    if gamma == 0:
        return torch.zeros(params.dim, dtype=DTYPE)
    if mode == "isotropic":
        return torch.full((params.dim,), gamma**0.5, dtype=DTYPE)
    scale = filter_sigma(params).per_parameter_scale
    if mode == "literal":
        return torch.sqrt(gamma * scale)
    return gamma**0.5 * scale


def lpf_sgd_step(
    state: OptimizerState,
    model: Objective,
    batch: Batch,
    cfg: LpfConfig,
    rng: SeededStream,
    log: Optional[StepLog] = None,
) -> OptimizerState:
    """
    One LPF-SGD step.

    The batch is split into cfg.M near-equal parts; for split i the kernel is
    rebuilt from the current filter norms, a perturbation z_i is drawn from
    the sub-stream (step, i) of ``rng`` and the split gradient at params + z_i
    is accumulated with weight |B_i| / |B|. The averaged gradient drives the
    momentum update of the unperturbed parameters.

    Raises:
        ConfigError: If M exceeds the batch size.
    """
    if cfg.M > batch.size:
        raise ConfigError(f"M={cfg.M} exceeds batch size {batch.size}")
    started = time.perf_counter_ns()
    gamma_t = gamma_schedule(min(state.step, cfg.T_total), cfg.T_total, cfg.gamma0, cfg.alpha)
    params = state.params
    gradient = torch.zeros(params.dim, dtype=DTYPE)
    loss = 0.0
    for i, split in enumerate(batch.split(cfg.M)):
        std = perturbation_std(params, gamma_t, cfg.covariance)
        probe = params.values
        if gamma_t > 0:
            noise = torch.randn(params.dim, generator=rng.generator(state.step, i), dtype=DTYPE)
            probe = probe + std * noise
        split_loss, split_grad = loss_and_grad(model, params.with_values(probe), split)
        weight = split.size / batch.size
        gradient = gradient + weight * split_grad.values
        loss += weight * split_loss
    _record(log, state, "lpf_sgd", loss, gradient, gamma_t, started)
    return _apply_update(state, gradient)


def mc_smoothed_gradient(
    model: Objective,
    params: ParamVector,
    batch: Batch,
    std: Union[float, torch.Tensor],
    samples: int,
    rng: SeededStream,
    chunk: int = 1024,
) -> Tuple[ParamVector, torch.Tensor]:
    """
    Monte Carlo estimate of the gradient of the Gaussian-smoothed loss,
    E[grad L(params + std * Z)].

    Returns:
        (mean gradient, per-coordinate standard error of the mean).
    """
    if samples < 2:
        raise ConfigError("need at least two samples for a standard error")
    gradient_fn = torch.func.vmap(torch.func.grad(lambda v: model.loss_fn(v, batch)))
    std = torch.as_tensor(std, dtype=DTYPE)
    total = torch.zeros(params.dim, dtype=DTYPE)
    total_sq = torch.zeros(params.dim, dtype=DTYPE)
    for c, start in enumerate(range(0, samples, chunk)):
        size = min(chunk, samples - start)
        noise = torch.randn(size, params.dim, generator=rng.generator(c), dtype=DTYPE)
        grads = gradient_fn(params.values + std * noise).detach()
        if not torch.isfinite(grads).all():
            bad = int(torch.nonzero(~torch.isfinite(grads).all(dim=1))[0])
            raise NumericError("non-finite smoothed gradient", sample=start + bad)
        total += grads.sum(dim=0)
        total_sq += grads.square().sum(dim=0)
    mean = total / samples
    variance = (total_sq / samples - mean.square()).clamp_min(0) * samples / (samples - 1)
    return params.with_values(mean), (variance / samples).sqrt()


def sam_step(
    state: OptimizerState,
    model: Objective,
    batch: Batch,
    rho: float,
    log: Optional[StepLog] = None,
) -> OptimizerState:
    """
    Sharpness-aware step: climb to params + rho * g / ||g||, take the gradient
    there, and apply it to the original parameters.

    A zero gradient has no ascent direction; the ascent is skipped and the
    step is flagged in the log.
    """
    if rho <= 0:
        raise ConfigError(f"rho must be > 0, got {rho}")
    started = time.perf_counter_ns()
    loss, gradient = loss_and_grad(model, state.params, batch)
    norm = gradient.values.norm()
    note = ""
    if norm == 0:
        logger.warning(f"SAM step {state.step}: zero gradient, ascent skipped.")
        direction = gradient.values
        note = "ascent_skipped"
    else:
        ascent = state.params.values + rho * gradient.values / norm
        _, final = loss_and_grad(model, state.params.with_values(ascent), batch)
        direction = final.values
    _record(log, state, "sam", loss, direction, 0.0, started, note)
    return _apply_update(state, direction)


def entropy_sgd_step(
    state: OptimizerState,
    model: Objective,
    batches: BatchSource,
    L: int,
    gamma: float,
    eta_inner: float,
    eps_noise: float,
    alpha_avg: float,
    rng: SeededStream,
    outer_lr_multiplier: float = 1.0,
    log: Optional[StepLog] = None,
) -> OptimizerState:
    """
    Entropy-SGD step.

    Runs L Langevin iterations of theta' from theta with
    g = grad L(theta', B) - gamma * (theta - theta') and
    theta' <- theta' - eta * g + sqrt(eta) * eps * N(0, I),
    keeps the running average mu <- (1 - alpha) mu + alpha theta',
    then moves theta along gamma * (theta - mu) with the momentum rule.

    Args:
        batches: A fixed batch, or a callable returning the next mini-batch.
        outer_lr_multiplier: Scales the outer learning rate (default 1).

    Raises:
        ConfigError: If L < 1 or gamma <= 0.
        NumericError: If an inner iterate becomes non-finite.
    """
    if L < 1:
        raise ConfigError(f"L must be >= 1, got {L}")
    if gamma <= 0:
        raise ConfigError("gamma must be > 0; with gamma = 0 the outer update vanishes")
    started = time.perf_counter_ns()
    mu, loss = langevin_average(
        model, state.params, batches, L, gamma, eta_inner, eps_noise, alpha_avg, rng.child(state.step)
    )
    direction = gamma * (state.params.values - mu.values)
    _record(log, state, "entropy_sgd", loss, direction, gamma, started)
    return _apply_update(state, direction, lr=state.lr * outer_lr_multiplier)


def langevin_average(
    model: Objective,
    params: ParamVector,
    batches: BatchSource,
    L: int,
    gamma: float,
    eta: float,
    eps_noise: float,
    alpha_avg: float,
    rng: SeededStream,
) -> Tuple[ParamVector, float]:
    """
    Run L SGLD iterations of theta' anchored at ``params`` and return the
    exponential average mu of the iterates plus the loss at the first one.

    Iteration k draws its noise from sub-stream k of ``rng``.

    Raises:
        ConfigError: If L < 1 or alpha_avg is outside (0, 1].
        NumericError: If an iterate becomes non-finite; inner_step names it.
    """
    if L < 1:
        raise ConfigError(f"L must be >= 1, got {L}")
    if not 0 < alpha_avg <= 1:
        raise ConfigError(f"alpha_avg must lie in (0, 1], got {alpha_avg}")
    next_batch = batches if callable(batches) else (lambda: batches)
    theta = params.values
    inner = theta.clone()
    mu = theta.clone()
    first_loss = 0.0
    for k in range(L):
        try:
            inner_loss, inner_grad = loss_and_grad(model, params.with_values(inner), next_batch())
        except NumericError as e:
            raise NumericError(f"Langevin gradient failed: {e}", inner_step=k) from e
        g = inner_grad.values - gamma * (theta - inner)
        inner = inner - eta * g
        if eps_noise:
            noise = torch.randn(theta.numel(), generator=rng.generator(k), dtype=DTYPE)
            inner = inner + eta**0.5 * eps_noise * noise
        if not torch.isfinite(inner).all():
            raise NumericError("non-finite Langevin iterate", inner_step=k)
        mu = (1 - alpha_avg) * mu + alpha_avg * inner
        if k == 0:
            first_loss = inner_loss
    return params.with_values(mu), first_loss
