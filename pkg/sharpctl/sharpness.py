"""
Sharpness measures evaluated at a trained parameter vector.

All measures use the loss over the full data passed in (normally the whole
training split) and are deterministic given their seed. Stochastic loops
draw each chunk of samples from its own keyed sub-stream.
"""

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from scipy.linalg import eigh_tridiagonal

from sharpctl.autodiff import Batch, Objective, ParamVector, forward, grad, hvp, hvp_many, losses_at
from sharpctl.config import Config
from sharpctl.errors import (
    ArchitectureError,
    ConfigError,
    NonBracketableError,
    NumericError,
    UndefinedDirectionError,
)
from sharpctl.optimizers import langevin_average
from sharpctl.utils import DTYPE, SeededStream, get_logger, substream

logger = get_logger(__name__)

MEASURE_NAMES = (
    "lpf",
    "eps_sharpness",
    "pac_bayes",
    "frn",
    "hess_frobenius",
    "lambda_max",
    "trace",
    "d_eff",
    "shannon_entropy",
    "local_entropy_grad",
)
SPECTRUM_MEASURES = ("lambda_max", "trace", "d_eff")

SEARCH_LOWER = 1e-12
SEARCH_UPPER = 1e3
MAX_BISECTIONS = 200
BREAKDOWN_TOL = 1e-12

# sub-stream keys, one per stochastic measure
_LPF_KEY, _PAC_KEY, _FROBENIUS_KEY, _LANCZOS_KEY, _ENTROPY_KEY = 1, 2, 3, 4, 5


@dataclass(frozen=True)
class MeasureReport:
    name: str
    value: float
    config: Dict[str, object] = field(default_factory=dict)
    dataset_id: str = ""

    def __post_init__(self) -> None:
        if self.name not in MEASURE_NAMES:
            raise ConfigError(f"unknown measure {self.name!r}")
        if not math.isfinite(self.value):
            raise NumericError(f"measure {self.name} is not finite")


@dataclass(frozen=True)
class SpectrumEstimate:
    """Ritz values (descending) with their Gauss quadrature weights."""

    ritz_values: np.ndarray
    weights: np.ndarray
    k: int
    breakdown: bool = False


@dataclass(frozen=True)
class BisectionResult:
    value: float
    deviation: float
    iterations: int
    # ||g|| of the search direction, set by the eps-sharpness search only
    direction_norm: Optional[float] = None


@dataclass(frozen=True)
class MeasureSettings:
    """Hyper-parameters of every measure, read from the measures.* config keys."""

    sigma: float = 0.01
    mc_samples: int = 100
    epsilon: float = 0.1
    psi: float = 1e-3
    delta: float = 0.05
    pac_target: float = 0.1
    frobenius_samples: int = 100
    lanczos_k: int = 100
    lanczos_probes: int = 10
    le_gamma: Optional[float] = None
    le_steps: int = 20
    le_eta: float = 0.01
    le_noise: float = 1e-4
    le_alpha: float = 0.25

    @classmethod
    def from_config(cls, config: Config) -> "MeasureSettings":
        return cls(
            sigma=config.get_float("measures.sigma"),
            mc_samples=config.get_int("measures.mc_samples"),
            epsilon=config.get_float("measures.epsilon"),
            psi=config.get_float("measures.psi"),
            delta=config.get_float("measures.delta"),
            pac_target=config.get_float("measures.pac_target"),
            frobenius_samples=config.get_int("measures.frobenius_samples"),
            lanczos_k=config.get_int("measures.lanczos_k"),
            lanczos_probes=config.get_int("measures.lanczos_probes"),
            le_gamma=config.get_optional_float("measures.le_gamma"),
            le_steps=config.get_int("measures.le_steps"),
            le_eta=config.get_float("measures.le_eta"),
            le_noise=config.get_float("measures.le_noise"),
            le_alpha=config.get_float("measures.le_alpha"),
        )


def _full_loss(model: Objective, params: ParamVector, data: Batch) -> float:
    return forward(model, params, data).loss


def _chunks(total: int, size: int):
    for c, start in enumerate(range(0, total, size)):
        yield c, start, min(size, total - start)


def _perturbed_losses(
    model: Objective,
    params: ParamVector,
    data: Batch,
    std: float,
    samples: int,
    seed: int,
    key: int,
    chunk: int,
) -> torch.Tensor:
    """Loss at params + std * z_j for j < samples, z_j from sub-stream (seed, key, chunk)."""
    out = torch.empty(samples, dtype=DTYPE)
    for c, start, size in _chunks(samples, chunk):
        noise = torch.randn(size, params.dim, generator=substream(seed, key, c), dtype=DTYPE)
        values = losses_at(model, params, data, std * noise)
        if not torch.isfinite(values).all():
            bad = int(torch.nonzero(~torch.isfinite(values))[0])
            raise NumericError("non-finite perturbed loss", sample=start + bad)
        out[start : start + size] = values
    return out


def lpf_measure(
    model: Objective,
    params: ParamVector,
    data: Batch,
    sigma: float = 0.01,
    M: int = 100,
    seed: int = 0,
    chunk: int = 1024,
) -> float:
    """
    Gaussian-filtered loss at params: mean over M draws of L(params + tau),
    tau ~ N(0, sigma^2 I).

    Raises:
        ConfigError: If sigma <= 0 or M < 1.
        NumericError: If the loss at some sample is not finite (names the sample).
    """
    if sigma <= 0 or M < 1:
        raise ConfigError("lpf measure needs sigma > 0 and M >= 1")
    return float(_perturbed_losses(model, params, data, sigma, M, seed, _LPF_KEY, chunk).mean())


def _bisect(
    deviation: Callable[[float], float],
    target: float,
    psi: float,
    lower: float,
    upper: float,
    what: str,
) -> BisectionResult:
    """Bisect on [lower, upper] for deviation(x) within psi of target; deviation is taken increasing."""
    low, high = lower, upper
    for iteration in range(1, MAX_BISECTIONS + 1):
        mid = 0.5 * (low + high)
        value = deviation(mid)
        logger.debug(f"{what} bisection {iteration}: x={mid:.6e} deviation={value:.6e}")
        if abs(value - target) <= psi:
            return BisectionResult(value=mid, deviation=value, iterations=iteration)
        if value < target:
            low = mid
        else:
            high = mid
    raise NonBracketableError(f"{what} bisection did not reach {target}+-{psi} in {MAX_BISECTIONS} steps")


def eps_sharpness_search(
    model: Objective,
    params: ParamVector,
    data: Batch,
    epsilon: float = 0.1,
    psi: float = 1e-3,
) -> BisectionResult:
    """
    Step length eta along the full-data gradient g such that
    L(params + eta g) - L(params) is within psi of epsilon.

    eta is bracketed by growing tenfold from 1e-12 and then bisected.

    Raises:
        UndefinedDirectionError: If ||g|| < 1e-12.
        NonBracketableError: If no eta up to 1e3 raises the loss by epsilon.
    """
    if epsilon <= 0 or psi <= 0:
        raise ConfigError("epsilon and psi must be > 0")
    g = grad(model, params, data).values
    g_norm = float(g.norm())
    if g_norm < 1e-12:
        raise UndefinedDirectionError("full-data gradient vanishes; eps-sharpness is undefined")
    base = _full_loss(model, params, data)

    def deviation(eta: float) -> float:
        return _full_loss(model, params.with_values(params.values + eta * g), data) - base

    # brackets are powers of ten in [SEARCH_LOWER, SEARCH_UPPER]; nothing past the ceiling is tried
    low = 0.0
    for exponent in range(round(math.log10(SEARCH_LOWER)), round(math.log10(SEARCH_UPPER)) + 1):
        high = 10.0**exponent
        if deviation(high) >= epsilon - psi:
            break
        low = high
    else:
        raise NonBracketableError(f"loss rises by less than {epsilon} for steps up to {SEARCH_UPPER}")
    result = _bisect(deviation, epsilon, psi, low, high, "eps-sharpness")
    # final independent evaluation of the accepted step
    achieved = deviation(result.value)
    if abs(achieved - epsilon) > psi:
        raise NonBracketableError(f"eps-sharpness deviation {achieved} misses {epsilon}+-{psi}")
    return replace(result, direction_norm=g_norm)


def eps_sharpness(
    model: Objective,
    params: ParamVector,
    data: Batch,
    epsilon: float = 0.1,
    psi: float = 1e-3,
) -> float:
    """Inverse length of the gradient-direction displacement that raises the loss by epsilon."""
    result = eps_sharpness_search(model, params, data, epsilon, psi)
    return 1.0 / (result.value * result.direction_norm)


def pac_bayes_sigma(
    model: Objective,
    params: ParamVector,
    data: Batch,
    M: int = 100,
    psi: float = 1e-3,
    target: float = 0.1,
    seed: int = 0,
    chunk: int = 1024,
) -> BisectionResult:
    """
    Noise scale sigma in [1e-12, 1e3] at which the expected loss increase
    E[L(params + N(0, sigma^2 I))] - L(params) is within psi of ``target``.

    The same M standard-normal draws are rescaled for every candidate sigma.

    Raises:
        NonBracketableError: If the deviation does not cross the target
            between the search bounds.
    """
    if M < 1:
        raise ConfigError(f"M must be >= 1, got {M}")
    base = _full_loss(model, params, data)
    draws = [
        torch.randn(size, params.dim, generator=substream(seed, _PAC_KEY, c), dtype=DTYPE)
        for c, _, size in _chunks(M, chunk)
    ]

    def deviation(sigma: float) -> float:
        total = 0.0
        for noise in draws:
            values = losses_at(model, params, data, sigma * noise)
            if not torch.isfinite(values).all():
                raise NumericError(f"non-finite perturbed loss at sigma={sigma:.3e}")
            total += float(values.sum())
        return total / M - base

    if deviation(SEARCH_LOWER) > target + psi:
        raise NonBracketableError("loss too sharp: deviation exceeds target at the smallest sigma")
    if deviation(SEARCH_UPPER) < target - psi:
        raise NonBracketableError("loss too flat: deviation stays below target at the largest sigma")
    result = _bisect(deviation, target, psi, SEARCH_LOWER, SEARCH_UPPER, "PAC-Bayes sigma")
    achieved = deviation(result.value)
    if abs(achieved - target) > psi:
        raise NonBracketableError(f"PAC-Bayes deviation {achieved} misses {target}+-{psi}")
    return result


def pac_bayes_bound(displacement_sq: float, sigma: float, m: int, delta: float) -> float:
    """||theta* - theta0||^2 / (4 sigma^2) + ln(m / delta) / 2."""
    return displacement_sq / (4.0 * sigma**2) + 0.5 * math.log(m / delta)


def _pac_bayes(
    model: Objective,
    params: ParamVector,
    initial_params: ParamVector,
    data: Batch,
    M: int,
    psi: float,
    delta: float,
    target: float,
    seed: int,
) -> Tuple[float, Optional[BisectionResult]]:
    m = data.size
    if m < 2:
        raise ConfigError("PAC-Bayes measure needs at least two examples")
    if not 0 < delta < 1:
        raise ConfigError(f"delta must lie in (0, 1), got {delta}")
    if initial_params.layout != params.layout:
        raise ArchitectureError("initial parameters do not match the trained parameters")
    displacement_sq = float((params.values - initial_params.values).square().sum())
    if displacement_sq == 0:
        return 0.5 * math.log(m / delta), None
    search = pac_bayes_sigma(model, params, data, M, psi, target, seed)
    return pac_bayes_bound(displacement_sq, search.value, m, delta), search


def pac_bayes_measure(
    model: Objective,
    params: ParamVector,
    initial_params: ParamVector,
    data: Batch,
    M: int = 100,
    psi: float = 1e-3,
    delta: float = 0.05,
    target: float = 0.1,
    seed: int = 0,
) -> float:
    """
    PAC-Bayes flatness bound with sigma found by pac_bayes_sigma and m the
    number of examples. A zero displacement gives ln(m / delta) / 2 directly.
    """
    value, _ = _pac_bayes(model, params, initial_params, data, M, psi, delta, target, seed)
    return value


def fisher_rao_norm(model: Objective, params: ParamVector, data: Batch) -> float:
    """theta^T H theta over the full data."""
    return float(params.values @ hvp(model, params, data, params).values)


def hessian_frobenius(
    model: Objective,
    params: ParamVector,
    data: Batch,
    M: int = 100,
    seed: int = 0,
    chunk: int = 256,
) -> float:
    """Hutchinson estimate sqrt(E ||H v||^2) over M standard-normal probes v."""
    if M < 1:
        raise ConfigError(f"M must be >= 1, got {M}")
    total = 0.0
    for c, _, size in _chunks(M, chunk):
        probes = torch.randn(size, params.dim, generator=substream(seed, _FROBENIUS_KEY, c), dtype=DTYPE)
        products = hvp_many(model, params, data, probes)
        if not torch.isfinite(products).all():
            raise NumericError("non-finite Hessian-vector product")
        total += float(products.square().sum())
    return math.sqrt(total / M)


def _rademacher_start(dim: int, seed: int) -> np.ndarray:
    generator = substream(seed, _LANCZOS_KEY)
    signs = torch.randint(0, 2, (dim,), generator=generator, dtype=torch.int64) * 2 - 1
    return signs.to(DTYPE).numpy() / math.sqrt(dim)


def lanczos_spectrum(
    model: Objective,
    params: ParamVector,
    data: Batch,
    k: Optional[int] = None,
    seed: int = 0,
) -> SpectrumEstimate:
    """
    k-step Lanczos with full reorthogonalization on the Hessian of the full
    data loss, started from a normalized Rademacher vector.

    Args:
        k: Number of steps; min(100, dim) when omitted.

    Returns:
        Ritz values in descending order and their quadrature weights (squared
        first components of the tridiagonal eigenvectors). A breakdown
        (beta < 1e-12) stops early with fewer values and sets ``breakdown``.
    """
    dim = params.dim
    k = min(100, dim) if k is None else int(k)
    if not 1 <= k <= dim:
        raise ConfigError(f"Lanczos steps must lie in [1, {dim}], got {k}")

    basis = np.zeros((k, dim))
    alphas: List[float] = []
    betas: List[float] = []
    q = _rademacher_start(dim, seed)
    breakdown = False
    for j in range(k):
        basis[j] = q
        w = hvp(model, params, data, params.with_values(torch.from_numpy(q))).values.numpy().copy()
        alpha = float(w @ q)
        alphas.append(alpha)
        if j == k - 1:
            break
        # two passes of classical Gram-Schmidt against every previous vector
        for _ in range(2):
            w -= basis[: j + 1].T @ (basis[: j + 1] @ w)
        beta = float(np.linalg.norm(w))
        if beta < BREAKDOWN_TOL:
            breakdown = True
            logger.warning(f"Lanczos breakdown after {j + 1} steps (beta={beta:.3e}).")
            break
        betas.append(beta)
        q = w / beta

    if len(alphas) == 1:
        return SpectrumEstimate(np.array(alphas), np.ones(1), k=1, breakdown=breakdown)
    eigenvalues, eigenvectors = eigh_tridiagonal(np.array(alphas), np.array(betas))
    weights = eigenvectors[0, :] ** 2
    order = np.argsort(eigenvalues)[::-1]
    return SpectrumEstimate(
        ritz_values=eigenvalues[order],
        weights=weights[order],
        k=len(alphas),
        breakdown=breakdown,
    )


def spectrum_measures(spec: SpectrumEstimate, dim: int) -> Tuple[float, float, float]:
    """(lambda_max, trace, d_eff) from one Lanczos run via Gauss quadrature."""
    if spec.k < 1 or len(spec.ritz_values) == 0:
        raise ConfigError("spectrum estimate is empty")
    if dim < 1:
        raise ConfigError(f"dim must be >= 1, got {dim}")
    ritz = np.asarray(spec.ritz_values, dtype=np.float64)
    weights = np.asarray(spec.weights, dtype=np.float64)
    lambda_max = float(ritz[0])
    trace = float(dim * np.sum(weights * ritz))
    d_eff = float(dim * np.sum(weights * ritz / (1.0 + ritz)))
    return lambda_max, trace, d_eff


def hessian_spectrum_measures(
    model: Objective,
    params: ParamVector,
    data: Batch,
    k: Optional[int] = None,
    probes: int = 10,
    seed: int = 0,
) -> Tuple[float, float, float]:
    """Largest lambda_max and probe-averaged trace and d_eff over ``probes`` Lanczos runs."""
    if probes < 1:
        raise ConfigError(f"probes must be >= 1, got {probes}")
    stream = SeededStream(seed, (_LANCZOS_KEY,))
    results = []
    for p in range(probes):
        probe_seed = int(stream.numpy(p).integers(0, 2**63 - 1))
        results.append(spectrum_measures(lanczos_spectrum(model, params, data, k, probe_seed), params.dim))
    lambda_max = max(r[0] for r in results)
    trace = sum(r[1] for r in results) / probes
    d_eff = sum(r[2] for r in results) / probes
    return lambda_max, trace, d_eff


def shannon_entropy(model: Objective, params: ParamVector, data: Batch) -> float:
    """Mean entropy of the predicted class distribution, with 0 ln 0 = 0."""
    probs = forward(model, params, data).per_example_probs
    if probs is None:
        raise ArchitectureError("objective does not produce class probabilities")
    return float(-torch.special.xlogy(probs, probs).sum(dim=1).mean())


def local_entropy_grad_norm(
    model: Objective,
    params: ParamVector,
    data: Batch,
    L: int,
    gamma: float,
    eta: float,
    eps: float,
    alpha_avg: float,
    seed: int = 0,
) -> float:
    """||gamma (theta* - mu)|| where mu averages L SGLD iterates anchored at theta*."""
    if gamma <= 0:
        raise ConfigError(f"gamma must be > 0, got {gamma}")
    mu, _ = langevin_average(
        model, params, data, L, gamma, eta, eps, alpha_avg, SeededStream(seed, (_ENTROPY_KEY,))
    )
    return float((gamma * (params.values - mu.values)).norm())


def compute_measures(
    model: Objective,
    params: ParamVector,
    data: Batch,
    names: Sequence[str],
    settings: MeasureSettings,
    seed: int = 0,
    initial_params: Optional[ParamVector] = None,
    dataset_id: str = "",
    skip_failures: bool = False,
) -> List[MeasureReport]:
    """
    Evaluate the named measures in order and describe each with the knobs used.

    The three spectrum measures share one set of Lanczos runs. With
    ``skip_failures`` a measure raising NumericError is logged and left out
    instead of aborting the rest.

    Raises:
        ConfigError: On unknown names, pac_bayes without initial parameters,
            or local_entropy_grad without a scoping gamma.
    """
    unknown = [name for name in names if name not in MEASURE_NAMES]
    if unknown:
        raise ConfigError(f"unknown measures {unknown} (choose from {list(MEASURE_NAMES)})")
    if "pac_bayes" in names and initial_params is None:
        raise ConfigError("pac_bayes needs the initial parameters")
    if "local_entropy_grad" in names and settings.le_gamma is None:
        raise ConfigError("local_entropy_grad needs measures.le_gamma")

    reports: List[MeasureReport] = []
    spectrum: Optional[Tuple[float, float, float]] = None
    for name in names:
        config: Dict[str, object] = {}
        try:
            if name == "lpf":
                value = lpf_measure(model, params, data, settings.sigma, settings.mc_samples, seed)
                config = {"sigma": settings.sigma, "M": settings.mc_samples, "seed": seed}
            elif name == "eps_sharpness":
                value = eps_sharpness(model, params, data, settings.epsilon, settings.psi)
                config = {"epsilon": settings.epsilon, "psi": settings.psi}
            elif name == "pac_bayes":
                value, search = _pac_bayes(
                    model,
                    params,
                    initial_params,
                    data,
                    settings.mc_samples,
                    settings.psi,
                    settings.delta,
                    settings.pac_target,
                    seed,
                )
                config = {
                    "sigma": None if search is None else search.value,
                    "M": settings.mc_samples,
                    "psi": settings.psi,
                    "delta": settings.delta,
                    "seed": seed,
                }
            elif name == "frn":
                value = fisher_rao_norm(model, params, data)
            elif name == "hess_frobenius":
                value = hessian_frobenius(model, params, data, settings.frobenius_samples, seed)
                config = {"M": settings.frobenius_samples, "seed": seed}
            elif name in SPECTRUM_MEASURES:
                if spectrum is None:
                    k = min(settings.lanczos_k, params.dim)
                    spectrum = hessian_spectrum_measures(
                        model, params, data, k, settings.lanczos_probes, seed
                    )
                value = spectrum[SPECTRUM_MEASURES.index(name)]
                config = {
                    "k": min(settings.lanczos_k, params.dim),
                    "probes": settings.lanczos_probes,
                    "seed": seed,
                }
            elif name == "shannon_entropy":
                value = shannon_entropy(model, params, data)
            else:
                value = local_entropy_grad_norm(
                    model,
                    params,
                    data,
                    settings.le_steps,
                    settings.le_gamma,
                    settings.le_eta,
                    settings.le_noise,
                    settings.le_alpha,
                    seed,
                )
                config = {
                    "L": settings.le_steps,
                    "gamma": settings.le_gamma,
                    "eta": settings.le_eta,
                    "eps": settings.le_noise,
                    "seed": seed,
                }
        except NumericError as e:
            if not skip_failures:
                raise
            logger.warning(f"Measure {name} skipped: {e}")
            continue
        logger.debug(f"Measure {name} = {value:.6g}")
        reports.append(MeasureReport(name=name, value=float(value), config=config, dataset_id=dataset_id))
    return reports
