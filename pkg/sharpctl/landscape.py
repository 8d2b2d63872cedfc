"""
Synthetic quadratic landscapes f(theta) = theta^T H theta / 2 with a chosen
spectrum, their closed-form measure values, and the sweeps comparing those
against the estimators in sharpctl.sharpness.
"""

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from sharpctl.autodiff import Batch, LayoutEntry, Objective, ParamVector
from sharpctl.errors import ArchitectureError, ConfigError
from sharpctl.sharpness import (
    MeasureSettings,
    fisher_rao_norm,
    hessian_frobenius,
    lanczos_spectrum,
    lpf_measure,
    spectrum_measures,
)
from sharpctl.utils import DTYPE, get_logger, np_substream

logger = get_logger(__name__)

FLAT_LOW, FLAT_HIGH = 1e-5, 1e-3
BASELINE_LOW, BASELINE_HIGH = 1.0, 10.0
DEFAULT_DIM = 100
EXPERIMENTS = ("flat_fraction", "mean_scaled")
ORACLE_MEASURES = ("lpf", "lambda_max", "trace", "hess_frobenius", "d_eff", "frn")


@dataclass(frozen=True)
class QuadraticLandscape:
    """
    Eigenvalues plus the seed of the orthogonal basis Q; H = Q diag(eigenvalues) Q^T.

    ``basis_seed=None`` keeps H diagonal.
    """

    eigenvalues: np.ndarray
    basis_seed: Optional[int] = 0

    def __post_init__(self) -> None:
        eigenvalues = np.asarray(self.eigenvalues, dtype=np.float64).reshape(-1)
        if eigenvalues.size < 1:
            raise ConfigError("a landscape needs at least one eigenvalue")
        if np.any(eigenvalues < 0):
            raise ConfigError("landscape eigenvalues must be non-negative")
        object.__setattr__(self, "eigenvalues", eigenvalues)

    @property
    def dim(self) -> int:
        return self.eigenvalues.size

    def basis(self) -> np.ndarray:
        if self.basis_seed is None:
            return np.eye(self.dim)
        gaussian = np_substream(self.basis_seed, 7).standard_normal((self.dim, self.dim))
        q, r = np.linalg.qr(gaussian)
        # sign fix makes Q Haar-distributed and unique per seed
        return q * np.sign(np.diag(r))

    def hessian(self) -> torch.Tensor:
        q = self.basis()
        return torch.from_numpy((q * self.eigenvalues) @ q.T)

    def scaled(self, factor: float) -> "QuadraticLandscape":
        return QuadraticLandscape(self.eigenvalues * factor, self.basis_seed)

    def objective(self) -> "QuadraticObjective":
        return QuadraticObjective(self.hessian())


class QuadraticObjective(Objective):
    """
    Adapter exposing theta^T H theta / 2 through the model interface.

    The batch is ignored; the whole vector is one layer with a single filter.
    """

    def __init__(self, hessian: torch.Tensor):
        hessian = torch.as_tensor(hessian, dtype=DTYPE)
        if hessian.dim() != 2 or hessian.shape[0] != hessian.shape[1]:
            raise ArchitectureError(f"Hessian must be square, got {tuple(hessian.shape)}")
        self.hessian = hessian
        self.dim = hessian.shape[0]

    def layout(self):
        return (LayoutEntry(0, "weight", (self.dim,), 0, self.dim),)

    def params(self, theta) -> ParamVector:
        theta = torch.as_tensor(theta, dtype=DTYPE).reshape(-1)
        if theta.numel() != self.dim:
            raise ArchitectureError(f"theta has {theta.numel()} entries, landscape has {self.dim}")
        return ParamVector(theta, self.layout(), (((0, self.dim),),))

    @staticmethod
    def batch(n: int = 1) -> Batch:
        return Batch(torch.zeros(n, 1, dtype=DTYPE), torch.zeros(n, dtype=torch.long))

    def loss_fn(self, values: torch.Tensor, batch: Batch) -> torch.Tensor:
        return 0.5 * values @ (self.hessian @ values)

    def check_params(self, params: ParamVector) -> None:
        if params.dim != self.dim:
            raise ArchitectureError(f"params have {params.dim} entries, landscape has {self.dim}")


def sample_flat_fraction(d: int, K: int, seed: int) -> QuadraticLandscape:
    """
    Baseline spectrum U[1, 10] (sorted descending) with the K smallest
    eigenvalues replaced by draws from U[1e-5, 1e-3].

    The baseline and the flat draws come from separate streams, so for one
    seed the baseline is shared by every K.
    """
    if d < 1:
        raise ConfigError(f"d must be >= 1, got {d}")
    if not 0 <= K <= d:
        raise ConfigError(f"K must lie in [0, {d}], got {K}")
    eigenvalues = np.sort(np_substream(seed, 1).uniform(BASELINE_LOW, BASELINE_HIGH, d))[::-1].copy()
    if K:
        eigenvalues[d - K :] = np_substream(seed, 2).uniform(FLAT_LOW, FLAT_HIGH, d)[:K]
    return QuadraticLandscape(eigenvalues, basis_seed=seed)


def sample_mean_scaled(d: int, K_mean: float, seed: int) -> QuadraticLandscape:
    """d eigenvalues from U[0.9 K, 1.1 K]."""
    if d < 1:
        raise ConfigError(f"d must be >= 1, got {d}")
    if K_mean <= 0:
        raise ConfigError(f"K_mean must be > 0, got {K_mean}")
    eigenvalues = np_substream(seed, 3).uniform(0.9 * K_mean, 1.1 * K_mean, d)
    return QuadraticLandscape(eigenvalues, basis_seed=seed)


def oracle_measures(
    land: QuadraticLandscape,
    sigma: float = 0.01,
    theta: Optional[Sequence[float]] = None,
) -> Dict[str, float]:
    """Exact measure values at the minimizer theta* = 0 (frn at ``theta`` when given)."""
    lam = land.eigenvalues
    values = {
        "lpf": sigma**2 * float(lam.sum()) / 2.0,
        "lambda_max": float(lam.max()),
        "trace": float(lam.sum()),
        "hess_frobenius": math.sqrt(float(np.square(lam).sum())),
        "d_eff": float((lam / (lam + 1.0)).sum()),
        "frn": 0.0,
    }
    if theta is not None:
        t = torch.as_tensor(theta, dtype=DTYPE).reshape(-1)
        values["frn"] = float(t @ (land.hessian() @ t))
    return values


def estimated_measures(
    land: QuadraticLandscape,
    sigma: float,
    settings: MeasureSettings,
    seed: int,
    theta: Optional[Sequence[float]] = None,
) -> Dict[str, float]:
    """The sharpness-module estimators run on the quadratic adapter."""
    objective = land.objective()
    at_zero = objective.params(torch.zeros(land.dim, dtype=DTYPE))
    batch = objective.batch()
    spectrum = lanczos_spectrum(objective, at_zero, batch, k=land.dim, seed=seed)
    lambda_max, trace, d_eff = spectrum_measures(spectrum, land.dim)
    frn_params = at_zero if theta is None else objective.params(theta)
    return {
        "lpf": lpf_measure(objective, at_zero, batch, sigma, settings.mc_samples, seed),
        "lambda_max": lambda_max,
        "trace": trace,
        "hess_frobenius": hessian_frobenius(objective, at_zero, batch, settings.frobenius_samples, seed),
        "d_eff": d_eff,
        "frn": fisher_rao_norm(objective, frn_params, batch),
    }


def landscape_sweep(
    experiment: str,
    values: Sequence[float],
    d: int = DEFAULT_DIM,
    seed: int = 0,
    sigma: float = 0.01,
    settings: Optional[MeasureSettings] = None,
) -> List[Dict[str, object]]:
    """
    Rows (sweep_param, sweep_value, measure, oracle_value, estimated_value, seed)
    for every sweep value and oracle measure.

    Args:
        experiment: ``flat_fraction`` (values are K, the number of flat
            eigenvalues) or ``mean_scaled`` (values are the mean eigenvalue).
    """
    if experiment not in EXPERIMENTS:
        raise ConfigError(f"experiment must be one of {EXPERIMENTS}, got {experiment!r}")
    settings = settings or MeasureSettings()
    rows: List[Dict[str, object]] = []
    for value in values:
        if experiment == "flat_fraction":
            land = sample_flat_fraction(d, int(value), seed)
            sweep_param = "K"
        else:
            land = sample_mean_scaled(d, float(value), seed)
            sweep_param = "K_mean"
        oracle = oracle_measures(land, sigma)
        estimate = estimated_measures(land, sigma, settings, seed)
        for measure in ORACLE_MEASURES:
            rows.append(
                {
                    "sweep_param": sweep_param,
                    "sweep_value": value,
                    "measure": measure,
                    "oracle_value": oracle[measure],
                    "estimated_value": estimate[measure],
                    "seed": seed,
                }
            )
        logger.info(f"Landscape {experiment} {sweep_param}={value}: trace={oracle['trace']:.4g}")
    return rows
