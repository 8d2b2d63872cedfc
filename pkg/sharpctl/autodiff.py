"""
Reverse-mode differentiation for flat parameter vectors.

Every objective (a feed-forward network or a synthetic quadratic) exposes a
pure ``loss_fn(values, batch)``; gradients come from ``torch.func.grad`` and
Hessian-vector products from forward-over-reverse ``jvp(grad(...))``, so the
Hessian is never materialized.
"""

from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from functools import lru_cache
from typing import List, Optional, Tuple

import numpy as np
import torch

from sharpctl.errors import ArchitectureError, NumericError
from sharpctl.utils import DTYPE, get_logger

logger = get_logger(__name__)

Range = Tuple[int, int]
FilterSlices = Tuple[Tuple[Range, ...], ...]


@dataclass(frozen=True)
class LayoutEntry:
    """One contiguous block of the flat parameter array."""

    layer: int
    role: str  # "weight" or "bias"
    shape: Tuple[int, ...]
    offset: int
    length: int


@lru_cache(maxsize=64)
def _filter_index(filter_slices: FilterSlices, dim: int) -> torch.Tensor:
    index = torch.full((dim,), -1, dtype=torch.long)
    for k, ranges in enumerate(filter_slices):
        for start, stop in ranges:
            index[start:stop] = k
    return index


@dataclass(frozen=True)
class ParamVector:
    """Flat float64 parameters plus the layout that gives them meaning."""

    values: torch.Tensor
    layout: Tuple[LayoutEntry, ...]
    filter_slices: FilterSlices = field(default=())

    def __post_init__(self) -> None:
        values = torch.as_tensor(self.values, dtype=DTYPE).reshape(-1)
        object.__setattr__(self, "values", values)
        expected = sum(entry.length for entry in self.layout)
        if expected != values.numel():
            raise ArchitectureError(
                f"layout describes {expected} parameters but {values.numel()} were given"
            )

    @property
    def dim(self) -> int:
        return self.values.numel()

    @property
    def num_filters(self) -> int:
        return len(self.filter_slices)

    def with_values(self, values: torch.Tensor) -> "ParamVector":
        """Same layout, new values."""
        return ParamVector(values, self.layout, self.filter_slices)

    def copy(self) -> "ParamVector":
        return self.with_values(self.values.clone())

    def zeros_like(self) -> "ParamVector":
        return self.with_values(torch.zeros_like(self.values))

    def block(self, layer: int, role: str) -> torch.Tensor:
        """View of one weight/bias block reshaped to its natural shape."""
        for entry in self.layout:
            if entry.layer == layer and entry.role == role:
                return self.values[entry.offset : entry.offset + entry.length].view(entry.shape)
        raise ArchitectureError(f"no {role} block for layer {layer}")

    def filter_index(self) -> torch.Tensor:
        """Filter id of every coordinate."""
        return _filter_index(self.filter_slices, self.dim)

    def filter_norms(self) -> torch.Tensor:
        """L2 norm of every filter (weights and bias together)."""
        squares = torch.zeros(self.num_filters, dtype=DTYPE)
        squares.index_add_(0, self.filter_index(), self.values.square())
        return squares.sqrt()

    def validate(self) -> None:
        """
        Check the structural invariants.

        Raises:
            ArchitectureError: If filters do not partition the parameters.
            NumericError: If any value is non-finite.
        """
        if self.filter_slices:
            covered = np.zeros(self.dim, dtype=np.int64)
            for ranges in self.filter_slices:
                for start, stop in ranges:
                    covered[start:stop] += 1
            if not np.all(covered == 1):
                raise ArchitectureError("filter slices must partition the parameter vector")
        if not torch.isfinite(self.values).all():
            bad = int(torch.nonzero(~torch.isfinite(self.values))[0])
            raise NumericError(f"parameter {bad} is not finite")


@dataclass(frozen=True)
class Batch:
    """Inputs (n x d_in) with integer labels."""

    inputs: torch.Tensor
    labels: torch.Tensor

    def __post_init__(self) -> None:
        inputs = torch.as_tensor(self.inputs, dtype=DTYPE)
        if inputs.dim() == 1:
            inputs = inputs.unsqueeze(1)
        labels = torch.as_tensor(self.labels, dtype=torch.long).reshape(-1)
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)
        if inputs.shape[0] < 1:
            raise ArchitectureError("a batch needs at least one example")
        if inputs.shape[0] != labels.shape[0]:
            raise ArchitectureError(
                f"{inputs.shape[0]} inputs but {labels.shape[0]} labels in batch"
            )
        if torch.isnan(inputs).any():
            raise NumericError("batch inputs contain NaN")

    @property
    def size(self) -> int:
        return self.inputs.shape[0]

    def split(self, parts: int) -> List["Batch"]:
        """Near-equal splits; the first (n mod parts) splits get one extra example."""
        return [
            Batch(x, y)
            for x, y in zip(
                torch.tensor_split(self.inputs, parts), torch.tensor_split(self.labels, parts)
            )
        ]

    def subset(self, index: torch.Tensor) -> "Batch":
        return Batch(self.inputs[index], self.labels[index])


@dataclass(frozen=True)
class EvalResult:
    """Mean loss on a batch plus per-example class probabilities."""

    loss: float
    per_example_probs: Optional[torch.Tensor]


class Objective(ABC):
    """Anything that maps (flat parameters, batch) to a scalar loss."""

    @abstractmethod
    def loss_fn(self, values: torch.Tensor, batch: Batch) -> torch.Tensor:
        """Pure, transform-safe scalar loss (no Python branching on values)."""

    @abstractmethod
    def check_params(self, params: ParamVector) -> None:
        """Raise ArchitectureError if params do not fit this objective."""

    def check_batch(self, batch: Batch) -> None:
        """Raise ArchitectureError if the batch does not fit this objective."""

    def evaluate(self, values: torch.Tensor, batch: Batch) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
        """Loss and probabilities, raising NumericError at the first bad layer."""
        return self.loss_fn(values, batch), None


def _check(model: Objective, params: ParamVector, batch: Batch) -> None:
    model.check_params(params)
    model.check_batch(batch)


def _raise_nonfinite(model: Objective, params: ParamVector, batch: Batch, what: str) -> None:
    # re-run the checked forward pass so the error names the offending layer
    with torch.no_grad():
        model.evaluate(params.values, batch)
    raise NumericError(f"non-finite {what}")


def forward(model: Objective, params: ParamVector, batch: Batch) -> EvalResult:
    """
    Evaluate the mean loss and class probabilities on a batch.

    Args:
        model: Network or synthetic objective.
        params: Parameters laid out for the model.
        batch: Mini-batch or full dataset.

    Returns:
        EvalResult with the mean cross-entropy and softmax rows.

    Raises:
        ArchitectureError: On layout or shape mismatch.
        NumericError: When an intermediate value is non-finite.
    """
    _check(model, params, batch)
    with torch.no_grad():
        loss, probs = model.evaluate(params.values, batch)
    if not torch.isfinite(loss):
        raise NumericError("non-finite loss")
    return EvalResult(loss=float(loss), per_example_probs=probs)


def loss_and_grad(model: Objective, params: ParamVector, batch: Batch) -> Tuple[float, ParamVector]:
    """Mean batch loss and its gradient in one reverse pass."""
    _check(model, params, batch)
    gradient, loss = torch.func.grad_and_value(lambda v: model.loss_fn(v, batch))(params.values)
    if not (torch.isfinite(loss) and torch.isfinite(gradient).all()):
        _raise_nonfinite(model, params, batch, "gradient")
    return float(loss), params.with_values(gradient.detach())


def grad(model: Objective, params: ParamVector, batch: Batch) -> ParamVector:
    """Gradient of the batch mean loss, same layout as params."""
    return loss_and_grad(model, params, batch)[1]


def _hvp_fn(model: Objective, batch: Batch):
    gradient_fn = torch.func.grad(lambda v: model.loss_fn(v, batch))

    def product(values: torch.Tensor, vector: torch.Tensor) -> torch.Tensor:
        return torch.func.jvp(gradient_fn, (values,), (vector,))[1]

    return product


def hvp(model: Objective, params: ParamVector, batch: Batch, v: ParamVector) -> ParamVector:
    """
    Hessian-vector product H v of the batch loss (forward-over-reverse).

    Args:
        model: Network or synthetic objective.
        params: Point at which the Hessian is taken.
        batch: Mini-batch or full dataset.
        v: Direction, same layout as params.

    Returns:
        H v as a ParamVector.
    """
    _check(model, params, batch)
    if v.dim != params.dim:
        raise ArchitectureError(f"vector has {v.dim} entries, params have {params.dim}")
    product = _hvp_fn(model, batch)(params.values, v.values).detach()
    if not torch.isfinite(product).all():
        _raise_nonfinite(model, params, batch, "Hessian-vector product")
    return params.with_values(product)


def hvp_many(model: Objective, params: ParamVector, batch: Batch, vectors: torch.Tensor) -> torch.Tensor:
    """H v for every row of ``vectors`` (k x dim), vectorized with vmap."""
    _check(model, params, batch)
    product = _hvp_fn(model, batch)
    return torch.func.vmap(lambda vec: product(params.values, vec))(vectors).detach()


def losses_at(model: Objective, params: ParamVector, batch: Batch, offsets: torch.Tensor) -> torch.Tensor:
    """Loss at ``params + offsets[i]`` for every row i, vectorized with vmap."""
    _check(model, params, batch)
    with torch.no_grad():
        return torch.func.vmap(lambda delta: model.loss_fn(params.values + delta, batch))(offsets)


def dense_hessian(model: Objective, params: ParamVector, batch: Batch) -> torch.Tensor:
    """Assemble the full Hessian column by column from dim HVP calls (small models only)."""
    eye = torch.eye(params.dim, dtype=DTYPE)
    hessian = hvp_many(model, params, batch, eye)
    return hessian.T.contiguous()
