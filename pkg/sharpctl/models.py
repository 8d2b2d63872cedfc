"""
Feed-forward networks over flat parameter vectors, prediction, checkpoints,
and the balancing transformation that equalizes per-unit weight norms while
preserving the network function.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import torch
import torch.nn.functional as F

from sharpctl.autodiff import Batch, LayoutEntry, Objective, ParamVector
from sharpctl.errors import (
    ArchitectureError,
    ConfigError,
    DatasetParseError,
    DegenerateFilterError,
    NumericError,
)
from sharpctl.utils import DTYPE, get_logger, substream

logger = get_logger(__name__)

ACTIVATIONS = ("relu", "identity")
CHECKPOINT_FORMAT = "sharpctl-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Model(Objective):
    """Dense network d_in -> h1 -> ... -> C with softmax cross-entropy."""

    layer_sizes: Tuple[int, ...]
    activations: Tuple[str, ...]

    def __post_init__(self) -> None:
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        object.__setattr__(self, "activations", tuple(self.activations))
        if len(sizes) < 2:
            raise ConfigError("a model needs at least an input and an output size")
        if any(s < 1 for s in sizes):
            raise ConfigError(f"layer sizes must be >= 1, got {list(sizes)}")
        if len(self.activations) != len(sizes) - 2:
            raise ConfigError(
                f"{len(sizes) - 2} hidden layers need as many activations, got {len(self.activations)}"
            )
        for name in self.activations:
            if name not in ACTIVATIONS:
                raise ConfigError(f"unknown activation {name!r} (choose from {ACTIVATIONS})")

    @property
    def num_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def num_classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    def layout(self) -> Tuple[LayoutEntry, ...]:
        """Weight (out x in) then bias (out) for each layer, in order."""
        entries = []
        offset = 0
        for layer in range(self.num_layers):
            fan_in, fan_out = self.layer_sizes[layer], self.layer_sizes[layer + 1]
            entries.append(LayoutEntry(layer, "weight", (fan_out, fan_in), offset, fan_in * fan_out))
            offset += fan_in * fan_out
            entries.append(LayoutEntry(layer, "bias", (fan_out,), offset, fan_out))
            offset += fan_out
        return tuple(entries)

    def filter_slices(self) -> Tuple[Tuple[Tuple[int, int], ...], ...]:
        """One filter per unit: its incoming weight row plus its bias."""
        layout = self.layout()
        filters = []
        for layer in range(self.num_layers):
            weight, bias = layout[2 * layer], layout[2 * layer + 1]
            fan_out, fan_in = weight.shape
            for unit in range(fan_out):
                row = weight.offset + unit * fan_in
                filters.append(((row, row + fan_in), (bias.offset + unit, bias.offset + unit + 1)))
        return tuple(filters)

    def num_params(self) -> int:
        return sum(entry.length for entry in self.layout())

    def new_params(self, values: torch.Tensor) -> ParamVector:
        params = ParamVector(values, self.layout(), self.filter_slices())
        params.validate()
        return params

    def check_params(self, params: ParamVector) -> None:
        if params.layout != self.layout():
            raise ArchitectureError(
                f"parameter layout does not match architecture {list(self.layer_sizes)}"
            )

    def check_batch(self, batch: Batch) -> None:
        if batch.inputs.shape[1] != self.input_dim:
            raise ArchitectureError(
                f"inputs have width {batch.inputs.shape[1]}, model expects {self.input_dim}"
            )
        if batch.labels.min() < 0 or batch.labels.max() >= self.num_classes:
            raise ArchitectureError(f"labels must lie in [0, {self.num_classes})")

    def unpack(self, values: torch.Tensor) -> List[Tuple[torch.Tensor, torch.Tensor]]:
        """(weight, bias) views for every layer."""
        layers = []
        offset = 0
        for layer in range(self.num_layers):
            fan_in, fan_out = self.layer_sizes[layer], self.layer_sizes[layer + 1]
            weight = values[offset : offset + fan_in * fan_out].reshape(fan_out, fan_in)
            offset += fan_in * fan_out
            bias = values[offset : offset + fan_out]
            offset += fan_out
            layers.append((weight, bias))
        return layers

    def _activate(self, layer: int, z: torch.Tensor) -> torch.Tensor:
        return torch.relu(z) if self.activations[layer] == "relu" else z

    def logits(self, values: torch.Tensor, inputs: torch.Tensor, checked: bool = False) -> torch.Tensor:
        h = inputs
        layers = self.unpack(values)
        for layer, (weight, bias) in enumerate(layers):
            h = h @ weight.T + bias
            if checked and not torch.isfinite(h).all():
                raise NumericError("non-finite pre-activation", layer=layer)
            if layer < len(layers) - 1:
                h = self._activate(layer, h)
        return h

    def loss_fn(self, values: torch.Tensor, batch: Batch) -> torch.Tensor:
        log_probs = torch.log_softmax(self.logits(values, batch.inputs), dim=-1)
        one_hot = F.one_hot(batch.labels, self.num_classes).to(DTYPE)
        return -(one_hot * log_probs).sum(dim=-1).mean()

    def evaluate(self, values: torch.Tensor, batch: Batch) -> Tuple[torch.Tensor, torch.Tensor]:
        logits = self.logits(values, batch.inputs, checked=True)
        log_probs = torch.log_softmax(logits, dim=-1)
        one_hot = F.one_hot(batch.labels, self.num_classes).to(DTYPE)
        loss = -(one_hot * log_probs).sum(dim=-1).mean()
        return loss, torch.softmax(logits, dim=-1)


@dataclass(frozen=True)
class BalanceReport:
    """Per-unit norms before and after balancing, and the verification result."""

    per_filter_norms_before: torch.Tensor
    per_filter_norms_after: torch.Tensor
    output_scale: torch.Tensor
    max_output_deviation: float


def build_mlp(
    layer_sizes: Sequence[int],
    seed: int,
    activation: str = "relu",
) -> Tuple[Model, ParamVector]:
    """
    Build a dense network with He-normal weights and zero biases.

    Args:
        layer_sizes: (d_in, h1, ..., C).
        seed: Seed of the initialization stream.
        activation: Activation for every hidden layer.

    Returns:
        (model, params), deterministic per seed.
    """
    if not layer_sizes:
        raise ConfigError("layer_sizes must not be empty")
    sizes = tuple(int(s) for s in layer_sizes)
    model = Model(sizes, (activation,) * max(len(sizes) - 2, 0))
    generator = substream(seed, 0)
    chunks = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        std = (2.0 / fan_in) ** 0.5
        chunks.append(torch.randn(fan_out * fan_in, generator=generator, dtype=DTYPE) * std)
        chunks.append(torch.zeros(fan_out, dtype=DTYPE))
    return model, model.new_params(torch.cat(chunks))


def predict_proba(model: Model, params: ParamVector, inputs: torch.Tensor) -> torch.Tensor:
    """Softmax class probabilities for every input row."""
    model.check_params(params)
    inputs = torch.as_tensor(inputs, dtype=DTYPE)
    if inputs.dim() != 2 or inputs.shape[1] != model.input_dim:
        raise ArchitectureError(
            f"inputs must be (n, {model.input_dim}), got {tuple(inputs.shape)}"
        )
    with torch.no_grad():
        return torch.softmax(model.logits(params.values, inputs, checked=True), dim=-1)


def balance(
    model: Model,
    params: ParamVector,
    verify_inputs: Optional[torch.Tensor] = None,
) -> Tuple[ParamVector, BalanceReport]:
    """
    Rescale every hidden unit to unit (weights + bias) norm without changing
    the network function.

    Layers are processed first to last. Unit j of hidden layer i is divided
    by its norm n_j and column j of layer i+1 is multiplied by n_j, which is
    exact because the activations are positively homogeneous. The scale left
    on the last hidden layer ends up folded into the output weights.

    Args:
        model: Network whose hidden activations are ReLU or identity.
        params: Parameters to balance.
        verify_inputs: Inputs for the function-preservation check; a fixed
            standard-normal set is used when omitted.

    Returns:
        (balanced params, report).

    Raises:
        DegenerateFilterError: If a hidden unit has zero norm.
    """
    model.check_params(params)
    values = params.values.clone()
    layers = model.unpack(values)
    before, after = [], []

    for layer in range(model.num_layers - 1):
        weight, bias = layers[layer]
        norms = torch.sqrt(weight.square().sum(dim=1) + bias.square())
        zero = torch.nonzero(norms == 0)
        if zero.numel():
            raise DegenerateFilterError(layer=layer, unit=int(zero[0]))
        before.append(norms.clone())
        weight.div_(norms[:, None])
        bias.div_(norms)
        next_weight, _ = layers[layer + 1]
        next_weight.mul_(norms[None, :])
        after.append(torch.sqrt(weight.square().sum(dim=1) + bias.square()))

    balanced = params.with_values(values)
    weight, bias = layers[-1]
    output_scale = torch.sqrt(weight.square().sum(dim=1) + bias.square())

    if verify_inputs is None:
        verify_inputs = torch.randn(64, model.input_dim, generator=substream(0, 1), dtype=DTYPE)
    reference = predict_proba(model, params, verify_inputs)
    result = predict_proba(model, balanced, verify_inputs)
    deviation = float(((result - reference).abs() / (reference.abs() + 1e-12)).max())

    empty = torch.zeros(0, dtype=DTYPE)
    report = BalanceReport(
        per_filter_norms_before=torch.cat(before) if before else empty,
        per_filter_norms_after=torch.cat(after) if after else empty,
        output_scale=output_scale,
        max_output_deviation=deviation,
    )
    logger.debug(
        f"Balanced {report.per_filter_norms_before.numel()} hidden units "
        f"(max output deviation {deviation:.3e})."
    )
    return balanced, report


def save_checkpoint(path: Union[str, Path], model: Model, params: ParamVector) -> Path:
    """Write a versioned checkpoint of the architecture and parameters."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "layer_sizes": list(model.layer_sizes),
            "activations": list(model.activations),
            "values": params.values.clone(),
        },
        path,
    )
    logger.info(f"Checkpoint written to {path}.")
    return path


def load_checkpoint(path: Union[str, Path]) -> Tuple[Model, ParamVector]:
    """
    Read a checkpoint written by save_checkpoint.

    Raises:
        DatasetParseError: If the file is not a sharpctl checkpoint of a
            supported version.
    """
    try:
        record = torch.load(Path(path), weights_only=True)
    except Exception as e:
        raise DatasetParseError(f"cannot read checkpoint {path}: {e}")
    if not isinstance(record, dict) or record.get("format") != CHECKPOINT_FORMAT:
        raise DatasetParseError(f"{path} is not a sharpctl checkpoint")
    if record.get("version") != CHECKPOINT_VERSION:
        raise DatasetParseError(f"unsupported checkpoint version {record.get('version')}")
    model = Model(tuple(record["layer_sizes"]), tuple(record["activations"]))
    return model, model.new_params(record["values"])
