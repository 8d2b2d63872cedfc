"""
Configuration management for sharpctl.
Reads line-oriented ``key = value`` files with dotted section keys.
"""

from pathlib import Path
from typing import Dict, List, Optional, Union

from sharpctl.errors import ConfigError
from sharpctl.utils import get_logger, stable_hash

logger = get_logger(__name__)

# Default configuration values
DEFAULT_CONFIG: Dict[str, str] = {
    # dataset
    "dataset.source": "synthetic",  # synthetic | csv | idx
    "dataset.kind": "blobs",  # blobs | moons | spirals
    "dataset.n": "2000",
    "dataset.d": "2",
    "dataset.classes": "2",
    "dataset.path": "",
    "dataset.test_path": "",
    "dataset.images": "",
    "dataset.labels": "",
    "dataset.test_images": "",
    "dataset.test_labels": "",
    "dataset.test_fraction": "0.25",
    "dataset.label_noise": "0.0",
    "dataset.data_noise": "0.0",
    "dataset.seed": "0",
    # model
    "model.hidden": "16",
    "model.activation": "relu",
    # optimizer
    "optimizer.name": "msgd",  # msgd | lpf_sgd | sam | entropy_sgd
    "optimizer.lr": "0.05",
    "optimizer.momentum": "0.9",
    "optimizer.weight_decay": "0.0005",
    "optimizer.batch_size": "32",
    "optimizer.lr_milestones": "",
    "optimizer.lr_decay": "0.1",
    "lpf.gamma0": "0.002",
    "lpf.alpha": "0.0",
    "lpf.mc_samples": "1",
    "lpf.covariance": "literal",  # literal | squared | isotropic
    "sam.rho": "0.05",
    "entropy.langevin_steps": "5",
    "entropy.gamma0": "0.5",
    "entropy.gamma1": "0.0001",
    "entropy.eta": "0.05",
    "entropy.noise": "0.0001",
    "entropy.alpha_avg": "0.25",
    "entropy.outer_lr_multiplier": "1.0",
    # stopping rule
    "stop.loss_threshold": "0.01",
    "stop.max_epochs": "300",
    # sharpness measures
    "measures.names": "lpf,shannon_entropy",
    "measures.sigma": "0.01",
    "measures.mc_samples": "100",
    "measures.epsilon": "0.1",
    "measures.psi": "0.001",
    "measures.delta": "0.05",
    "measures.pac_target": "0.1",
    "measures.frobenius_samples": "100",
    "measures.lanczos_k": "100",
    "measures.lanczos_probes": "10",
    "measures.le_gamma": "",
    "measures.le_steps": "20",
    "measures.le_eta": "0.01",
    "measures.le_noise": "0.0001",
    "measures.le_alpha": "0.25",
    # run / sweep
    "run.seeds": "0",
    "run.output_dir": "runs",
    "run.workers": "1",
    "run.threads": "1",
    "sweep.axis": "hyperparam",  # hyperparam | label_noise | data_noise | width
    "sweep.key": "optimizer.lr",
    "sweep.values": "",
}


class Config:
    """Configuration for one experiment: defaults overlaid by a config file."""

    def __init__(self, values: Optional[Dict[str, str]] = None):
        """
        Initialize a configuration.

        Args:
            values: Overrides applied on top of DEFAULT_CONFIG.
        """
        self._values: Dict[str, str] = dict(DEFAULT_CONFIG)
        for key, value in (values or {}).items():
            self.set(key, value)

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "Config":
        """
        Load a configuration file.

        Args:
            path: Path to a UTF-8 file of ``key = value`` lines.

        Returns:
            Config with the file's values applied.

        Raises:
            ConfigError: On syntax errors, unknown or duplicate keys.
        """
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config file {path}: {e}")
        return cls.from_text(text)

    @classmethod
    def from_text(cls, text: str) -> "Config":
        """Parse configuration text (see from_file)."""
        config = cls()
        seen: Dict[str, int] = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", line=lineno)
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in DEFAULT_CONFIG:
                raise ConfigError(f"unknown key {key!r}", line=lineno)
            if key in seen:
                raise ConfigError(f"duplicate key {key!r} (first set on line {seen[key]})", line=lineno)
            seen[key] = lineno
            config._values[key] = value
        logger.debug(f"Loaded {len(seen)} config keys.")
        return config

    def get(self, key: str) -> Optional[str]:
        """
        Get a configuration value.

        Args:
            key: Configuration key.

        Returns:
            Configuration value or None if not set.
        """
        return self._values.get(key)

    def set(self, key: str, value: str) -> None:
        """
        Set a configuration value.

        Args:
            key: Configuration key.
            value: Configuration value.
        """
        if key not in DEFAULT_CONFIG:
            raise ConfigError(f"unknown key {key!r}")
        self._values[key] = str(value)

    def get_all(self) -> Dict[str, str]:
        """Get all configuration as a dictionary."""
        return dict(self._values)

    def copy(self) -> "Config":
        return Config(self._values)

    def get_int(self, key: str) -> int:
        """Get a configuration value as integer."""
        value = self._require(key)
        try:
            return int(value)
        except ValueError:
            raise ConfigError(f"{key} must be an integer, got {value!r}")

    def get_float(self, key: str) -> float:
        """Get a configuration value as float."""
        value = self._require(key)
        try:
            return float(value)
        except ValueError:
            raise ConfigError(f"{key} must be a number, got {value!r}")

    def get_optional_float(self, key: str) -> Optional[float]:
        """Get a float value, or None when the key is empty."""
        if not (self.get(key) or "").strip():
            return None
        return self.get_float(key)

    def get_list(self, key: str) -> List[str]:
        """Get a comma-separated value as a list of stripped strings."""
        value = self.get(key) or ""
        return [item.strip() for item in value.split(",") if item.strip()]

    def get_int_list(self, key: str) -> List[int]:
        try:
            return [int(item) for item in self.get_list(key)]
        except ValueError:
            raise ConfigError(f"{key} must be a comma-separated list of integers")

    def get_float_list(self, key: str) -> List[float]:
        try:
            return [float(item) for item in self.get_list(key)]
        except ValueError:
            raise ConfigError(f"{key} must be a comma-separated list of numbers")

    def fingerprint(
        self, exclude: tuple = ("run.seeds", "run.output_dir", "run.workers", "run.threads")
    ) -> str:
        """Deterministic hash of every key that affects a single run's outcome."""
        lines = [f"{k}={v}" for k, v in sorted(self._values.items()) if k not in exclude]
        return stable_hash("\n".join(lines))

    def to_text(self) -> str:
        """Serialize back to the file format (sorted keys)."""
        return "".join(f"{k} = {v}\n" for k, v in sorted(self._values.items()))

    def _require(self, key: str) -> str:
        value = self.get(key)
        if value is None or not value.strip():
            raise ConfigError(f"{key} is required")
        return value
