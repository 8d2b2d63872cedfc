"""
Fast self-test suite behind ``sharpctl check``: each check compares an
implementation against a closed form or a brute-force reference.
"""

import itertools
import math
from dataclasses import dataclass
from typing import Callable, List, Sequence, Tuple

import numpy as np
import torch

from sharpctl.analysis import GeBoundInputs, catalog_function, ge_ratio, kendall_tau, theorem1_property_check
from sharpctl.autodiff import Batch, dense_hessian, forward
from sharpctl.landscape import QuadraticLandscape, oracle_measures
from sharpctl.models import balance, build_mlp
from sharpctl.optimizers import LpfConfig, OptimizerState, lpf_sgd_step, msgd_step
from sharpctl.schedules import gamma_schedule
from sharpctl.sharpness import lanczos_spectrum, lpf_measure
from sharpctl.utils import DTYPE, SeededStream, get_logger, np_substream

logger = get_logger(__name__)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


def brute_force_tau(x: Sequence[float], y: Sequence[float]) -> float:
    """Tau-b from an O(n^2) count of concordant, discordant and tied pairs."""
    concordant = discordant = ties_x = ties_y = 0
    for i, j in itertools.combinations(range(len(x)), 2):
        dx = np.sign(x[i] - x[j])
        dy = np.sign(y[i] - y[j])
        if dx == 0 and dy == 0:
            continue
        if dx == 0:
            ties_x += 1
        elif dy == 0:
            ties_y += 1
        elif dx == dy:
            concordant += 1
        else:
            discordant += 1
    denominator = math.sqrt((concordant + discordant + ties_x) * (concordant + discordant + ties_y))
    return (concordant - discordant) / denominator


def _small_network(seed: int) -> Tuple[object, object, Batch]:
    model, params = build_mlp((3, 5, 4, 2), seed)
    rng = np_substream(seed, 90)
    inputs = torch.from_numpy(rng.standard_normal((40, 3)))
    labels = torch.from_numpy(rng.integers(0, 2, 40))
    return model, params, Batch(inputs, labels)


def check_gamma_schedule(seed: int) -> CheckResult:
    start = gamma_schedule(0, 100, 1.0, 2.0)
    end = gamma_schedule(100, 100, 1.0, 2.0)
    middle = gamma_schedule(50, 100, 1.0, 2.0)
    passed = start == 1.0 and end == 3.0 and abs(middle - 2.0) < 1e-12
    return CheckResult("gamma_schedule", passed, f"gamma(0)={start} gamma(T/2)={middle} gamma(T)={end}")


def check_lpf_closed_form(seed: int) -> CheckResult:
    land = QuadraticLandscape(np.linspace(0.5, 2.0, 10), basis_seed=seed)
    objective = land.objective()
    at_zero = objective.params(torch.zeros(land.dim, dtype=DTYPE))
    estimate = lpf_measure(objective, at_zero, objective.batch(), 0.1, 20000, seed)
    exact = oracle_measures(land, 0.1)["lpf"]
    error = abs(estimate - exact) / exact
    return CheckResult("lpf_closed_form", error < 0.05, f"estimate={estimate:.5f} exact={exact:.5f}")


def check_kendall(seed: int) -> CheckResult:
    rng = np_substream(seed, 91)
    worst = 0.0
    for trial in range(20):
        n = int(rng.integers(5, 60))
        x = rng.integers(0, 8, n).astype(float)
        y = rng.integers(0, 8, n).astype(float)
        worst = max(worst, abs(kendall_tau(x, y).tau - brute_force_tau(x, y)))
    return CheckResult("kendall_brute_force", worst < 1e-12, f"max |difference|={worst:.2e}")


def check_ge_ratio(seed: int) -> CheckResult:
    collapsed = ge_ratio(GeBoundInputs(1.0, 10.0, 0.1, 1000, 0.05))
    smoothed = ge_ratio(GeBoundInputs(1.0, 10.0, 0.1, 1000, 1.0))
    passed = collapsed.rho == 1.0 and smoothed.rho < 1.0
    return CheckResult("ge_ratio", passed, f"rho(collapsed)={collapsed.rho} rho(sigma=1)={smoothed.rho:.4f}")


def check_balance(seed: int) -> CheckResult:
    model, params, batch = _small_network(seed)
    scaled = params.values.clone()
    scaled[: model.layout()[0].length] *= 7.0
    skewed = params.with_values(scaled)
    balanced, report = balance(model, skewed, verify_inputs=batch.inputs)
    norms = balanced.filter_norms()[: sum(model.layer_sizes[1:-1])]
    passed = report.max_output_deviation <= 1e-9 and bool(torch.allclose(norms, torch.ones_like(norms)))
    return CheckResult("balance", passed, f"output deviation={report.max_output_deviation:.2e}")


def check_lanczos(seed: int) -> CheckResult:
    model, params, batch = _small_network(seed)
    exact = float(torch.linalg.eigvalsh(dense_hessian(model, params, batch)).max())
    estimate = float(lanczos_spectrum(model, params, batch, k=params.dim, seed=seed).ritz_values[0])
    error = abs(estimate - exact) / max(abs(exact), 1e-12)
    return CheckResult("lanczos_lambda_max", error < 0.01, f"estimate={estimate:.6f} dense={exact:.6f}")


def check_smoothing(seed: int) -> CheckResult:
    result = theorem1_property_check(catalog_function("abs"), 0.5, M=4000, seed=seed)
    detail = (
        f"L={result.lipschitz:.3f}/{result.lipschitz_bound} "
        f"beta={result.smoothness:.3f}/{result.smoothness_bound}"
    )
    return CheckResult("smoothing_properties", result.passed, detail)


def check_lpf_reduces_to_msgd(seed: int) -> CheckResult:
    model, params, batch = _small_network(seed)
    lpf = LpfConfig(gamma0=0.0, alpha=0.0, M=4, T_total=20)
    stream = SeededStream(seed, (200,))
    plain = smoothed = OptimizerState(params, lr=0.05, momentum=0.9, weight_decay=5e-4)
    for _ in range(20):
        plain = msgd_step(plain, model, batch)
        smoothed = lpf_sgd_step(smoothed, model, batch, lpf, stream)
    gap = float((plain.params.values - smoothed.params.values).abs().max())
    loss = forward(model, plain.params, batch).loss
    return CheckResult("lpf_sgd_degenerate", gap <= 1e-12, f"max |difference|={gap:.2e} loss={loss:.4f}")


CHECKS: List[Callable[[int], CheckResult]] = [
    check_gamma_schedule,
    check_lpf_closed_form,
    check_kendall,
    check_ge_ratio,
    check_balance,
    check_lanczos,
    check_smoothing,
    check_lpf_reduces_to_msgd,
]


def run_checks(seed: int = 0) -> List[CheckResult]:
    """Run every check and log its outcome."""
    results = []
    for check in CHECKS:
        result = check(seed)
        log = logger.info if result.passed else logger.error
        log(f"Check {result.name}: {'passed' if result.passed else 'FAILED'} ({result.detail})")
        results.append(result)
    return results
