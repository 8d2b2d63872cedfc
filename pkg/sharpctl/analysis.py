"""
Statistics over finished runs and the closed-form theory calculators.

- Kendall rank correlation (tau-b) with a normal-approximation 95% interval.
- Min-max normalization of measure columns and generalization gaps.
- Uniform-stability generalization bounds for SGD on the raw and on the
  Gaussian-smoothed loss, and their ratio.
- An empirical check of the Lipschitz/smoothness/sandwich properties of
  Gaussian smoothing on functions with known constants.
"""

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from scipy.stats import kendalltau

from sharpctl.errors import ConfigError, DegenerateNormalizationError, UndefinedCorrelationError
from sharpctl.utils import DTYPE, get_logger, substream

logger = get_logger(__name__)

Z95 = 1.96


@dataclass(frozen=True)
class CorrelationResult:
    tau: float
    n: int
    ci95_halfwidth: float


def kendall_ci_halfwidth(n: int) -> float:
    """1.96 * sqrt(2 (2n + 5) / (9 n (n - 1))), the tau standard error under independence."""
    return Z95 * math.sqrt(2.0 * (2 * n + 5) / (9.0 * n * (n - 1)))


def kendall_tau(x: Sequence[float], y: Sequence[float]) -> CorrelationResult:
    """
    Tie-corrected Kendall tau-b between x and y.

    Raises:
        ConfigError: If lengths differ or n < 2.
        UndefinedCorrelationError: If either sequence is constant.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ConfigError(f"kendall_tau needs two 1-D arrays of equal length, got {x.shape} and {y.shape}")
    n = x.size
    if n < 2:
        raise ConfigError(f"kendall_tau needs at least 2 points, got {n}")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise UndefinedCorrelationError("rank correlation of a constant sequence is undefined")
    tau = kendalltau(x, y, variant="b").statistic
    if not math.isfinite(tau):
        raise UndefinedCorrelationError("rank correlation is undefined for this input")
    return CorrelationResult(tau=float(tau), n=n, ci95_halfwidth=kendall_ci_halfwidth(n))


def generalization_gap(train_error: float, test_error: float) -> float:
    """Test error minus train error."""
    for name, value in (("train_error", train_error), ("test_error", test_error)):
        if not 0.0 <= value <= 1.0:
            raise ConfigError(f"{name} must lie in [0, 1], got {value}")
    return test_error - train_error


def normalize_measures(values: Sequence[float]) -> np.ndarray:
    """Min-max scaling onto [0, 1]."""
    values = np.asarray(values, dtype=np.float64)
    if values.size < 1:
        raise ConfigError("nothing to normalize")
    low, high = values.min(), values.max()
    if not high > low:
        raise DegenerateNormalizationError("cannot normalize a constant sequence")
    return (values - low) / (high - low)


@dataclass(frozen=True)
class GeBoundInputs:
    """Constants of the stability bounds: loss alpha-Lipschitz and beta-smooth, step sizes c/t."""

    alpha_lip: float
    beta_smooth: float
    c: float
    T: int
    sigma: float

    def __post_init__(self) -> None:
        for name in ("alpha_lip", "beta_smooth", "c", "sigma"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.T < 1:
            raise ConfigError(f"T must be >= 1, got {self.T}")

    @property
    def p(self) -> float:
        return 1.0 / (self.beta_smooth * self.c + 1.0)

    @property
    def p_hat(self) -> float:
        smooth = min(self.alpha_lip / self.sigma, self.beta_smooth)
        return 1.0 / (smooth * self.c + 1.0)

    @property
    def collapsed(self) -> bool:
        """Smoothing does not improve the smoothness constant (sigma <= alpha / beta)."""
        return self.alpha_lip / self.sigma >= self.beta_smooth


@dataclass(frozen=True)
class GeRatio:
    rho: float
    p: float
    p_hat: float
    collapsed: bool


def ge_ratio(inp: GeBoundInputs) -> GeRatio:
    """
    Ratio of the smoothed-loss bound to the raw-loss bound,
    rho = (1 - p) / (1 - p_hat) * (2 c alpha^2 / T)^(p_hat - p).

    When sigma <= alpha / beta both exponents agree and rho is exactly 1.
    """
    p, p_hat = inp.p, inp.p_hat
    if inp.collapsed:
        return GeRatio(rho=1.0, p=p, p_hat=p, collapsed=True)
    base = 2.0 * inp.c * inp.alpha_lip**2 / inp.T
    rho = (1.0 - p) / (1.0 - p_hat) * base ** (p_hat - p)
    return GeRatio(rho=rho, p=p, p_hat=p_hat, collapsed=False)


def _stability_bound(p: float, inp: GeBoundInputs, m: int) -> float:
    if m < 2:
        raise ConfigError(f"m must be >= 2, got {m}")
    return (1.0 / (1.0 - p)) / (m - 1) * (2.0 * inp.c * inp.alpha_lip**2) ** p * inp.T ** (1.0 - p)


def ge_bound_sgd(inp: GeBoundInputs, m: int) -> float:
    """Uniform-stability generalization bound of SGD after T steps on m examples."""
    return _stability_bound(inp.p, inp, m)


def ge_bound_lpf(inp: GeBoundInputs, m: int) -> float:
    """Same bound on the Gaussian-smoothed loss (smoothness min(alpha / sigma, beta))."""
    return _stability_bound(inp.p_hat, inp, m)


def ge_ratio_table(
    alpha: float,
    beta: float,
    c: float,
    sigmas: Sequence[float],
    horizons: Sequence[int],
    m: Optional[int] = None,
) -> List[Dict[str, object]]:
    """One row per (sigma, T) with p, p_hat and rho; with ``m`` also both bounds."""
    rows = []
    for sigma in sigmas:
        for T in horizons:
            inp = GeBoundInputs(alpha, beta, c, int(T), sigma)
            result = ge_ratio(inp)
            row: Dict[str, object] = {
                "alpha": alpha,
                "beta": beta,
                "c": c,
                "sigma": sigma,
                "T": int(T),
                "p": result.p,
                "p_hat": result.p_hat,
                "rho": result.rho,
                "collapsed": result.collapsed,
            }
            if m is not None:
                row["bound_sgd"] = ge_bound_sgd(inp, m)
                row["bound_lpf"] = ge_bound_lpf(inp, m)
            rows.append(row)
    return rows


@dataclass(frozen=True)
class CatalogFunction:
    """
    Radial convex function f(x) = h(||x||) with certified constants.

    h and its derivative are given in closed form; ``beta`` is inf for
    functions that are not smooth.
    """

    name: str
    alpha: float
    beta: float
    dim: int
    kink: float = 0.0  # radius where h turns from quadratic to linear

    def profile(self, r: torch.Tensor) -> torch.Tensor:
        if self.kink == 0.0:
            return self.alpha * r
        slope = self.alpha / self.kink
        return torch.where(r <= self.kink, 0.5 * slope * r**2, self.alpha * (r - 0.5 * self.kink))

    def derivative(self, r: torch.Tensor) -> torch.Tensor:
        if self.kink == 0.0:
            return torch.full_like(r, self.alpha)
        return self.alpha * torch.clamp(r / self.kink, max=1.0)

    def value(self, x: torch.Tensor) -> torch.Tensor:
        return self.profile(x.norm(dim=-1))

    def grad_first(self, x: torch.Tensor) -> torch.Tensor:
        """d f / d x_1 for every row of x."""
        r = x.norm(dim=-1)
        safe = torch.where(r > 0, r, torch.ones_like(r))
        return torch.where(r > 0, self.derivative(r) * x[..., 0] / safe, torch.zeros_like(r))


CATALOG_NAMES = ("abs", "huber", "quadratic")


def catalog_function(
    name: str, dim: int = 1, alpha: float = 1.0, beta: float = 10.0, radius: float = 1.0
) -> CatalogFunction:
    """
    Build a catalog function.

    - ``abs``: alpha ||x||, alpha-Lipschitz and not smooth.
    - ``huber``: alpha-Lipschitz Huber with smoothness beta.
    - ``quadratic``: beta ||x||^2 / 2 inside the ball of ``radius``,
      continued linearly outside, so alpha = beta * radius.
    """
    if dim < 1:
        raise ConfigError(f"dim must be >= 1, got {dim}")
    if name == "abs":
        return CatalogFunction(name, alpha=alpha, beta=math.inf, dim=dim)
    if name == "huber":
        return CatalogFunction(name, alpha=alpha, beta=beta, dim=dim, kink=alpha / beta)
    if name == "quadratic":
        return CatalogFunction(name, alpha=beta * radius, beta=beta, dim=dim, kink=radius)
    raise ConfigError(f"unknown test function {name!r} (choose from {CATALOG_NAMES})")


@dataclass(frozen=True)
class SmoothingCheck:
    name: str
    sigma: float
    dim: int
    lipschitz: float
    lipschitz_bound: float
    smoothness: float
    smoothness_bound: float
    max_excess: float
    sandwich_bound: float
    lipschitz_ok: bool
    smoothness_ok: bool
    sandwich_ok: bool

    @property
    def passed(self) -> bool:
        return self.lipschitz_ok and self.smoothness_ok and self.sandwich_ok


def theorem1_property_check(
    testfn: CatalogFunction,
    sigma: float,
    M: int = 20000,
    seed: int = 0,
    tol: float = 0.05,
    span: float = 1.0,
) -> SmoothingCheck:
    """
    Smooth ``testfn`` with N(0, sigma^2 I) by Monte Carlo and compare its
    empirical constants along the first axis with the certified ones:
    Lipschitz <= alpha, gradient Lipschitz <= min(alpha / sigma, beta) and
    f <= f_sigma <= f + alpha sigma sqrt(d).

    The grid has spacing sigma / 10 over [-(3 sigma + span), 3 sigma + span];
    every grid point reuses the same M antithetic pairs of draws.
    """
    if sigma <= 0 or M < 2:
        raise ConfigError("need sigma > 0 and M >= 2")
    step = 0.1 * sigma
    half = int(math.ceil((3.0 * sigma + span) / step))
    grid = step * torch.arange(-half, half + 1, dtype=DTYPE)
    noise = torch.randn(M, testfn.dim, generator=substream(seed, 0), dtype=DTYPE)

    smoothed = torch.empty_like(grid)
    stderr = torch.empty_like(grid)
    slope = torch.empty_like(grid)
    axis = torch.zeros(testfn.dim, dtype=DTYPE)
    axis[0] = 1.0
    for i, t in enumerate(grid):
        x = t * axis
        plus, minus = x + sigma * noise, x - sigma * noise
        pairs = 0.5 * (testfn.value(plus) + testfn.value(minus))
        smoothed[i] = pairs.mean()
        stderr[i] = pairs.std() / math.sqrt(M)
        slope[i] = 0.5 * (testfn.grad_first(plus) + testfn.grad_first(minus)).mean()

    lipschitz = float((smoothed.diff().abs() / step).max())
    smoothness = float((slope.diff().abs() / step).max())
    raw = testfn.value(grid[:, None] * axis)
    excess = smoothed - raw
    band = 3.0 * stderr + 1e-12
    sandwich_bound = testfn.alpha * sigma * math.sqrt(testfn.dim)
    smoothness_bound = min(testfn.alpha / sigma, testfn.beta)
    check = SmoothingCheck(
        name=testfn.name,
        sigma=sigma,
        dim=testfn.dim,
        lipschitz=lipschitz,
        lipschitz_bound=testfn.alpha,
        smoothness=smoothness,
        smoothness_bound=smoothness_bound,
        max_excess=float(excess.max()),
        sandwich_bound=sandwich_bound,
        lipschitz_ok=lipschitz <= testfn.alpha * (1.0 + tol),
        smoothness_ok=smoothness <= smoothness_bound * (1.0 + tol),
        sandwich_ok=bool(((excess >= -band) & (excess <= sandwich_bound + band)).all()),
    )
    logger.debug(
        f"Smoothing check {testfn.name} sigma={sigma}: L={lipschitz:.4f} "
        f"beta={smoothness:.4f}/{smoothness_bound:.4f} passed={check.passed}"
    )
    return check
