"""
Utility functions for logging, seeding, time handling, and common operations.
"""

import hashlib
import logging
import os
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Tuple

import numpy as np
import torch
from rich.console import Console
from rich.logging import RichHandler

# Configure logging
LOG_FORMAT = "%(name)s - %(message)s"
LOG_FILE_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

_file_handler = logging.FileHandler(".sharpctl.log", mode="a")
_file_handler.setFormatter(logging.Formatter(LOG_FILE_FORMAT))

logging.basicConfig(
    level=os.environ.get("SHARPCTL_LOG_LEVEL", "INFO").upper(),
    format=LOG_FORMAT,
    handlers=[
        RichHandler(console=Console(stderr=True), show_path=False),
        _file_handler,
    ],
)

DTYPE = torch.float64


def get_logger(name: str) -> logging.Logger:
    """Get or create a logger instance."""
    return logging.getLogger(name)


def get_db_path(output_dir: Path) -> Path:
    """Get the run registry path inside an output directory."""
    return Path(output_dir) / "runs.db"


def now_timestamp() -> str:
    """Get current timestamp as ISO string."""
    return datetime.now(timezone.utc).replace(tzinfo=None).isoformat() + "Z"


def ensure_dir(path: Path) -> Path:
    """Create a directory (and parents) if missing and return it."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _seed_sequence(seed: int, keys: Iterable[int]) -> np.random.SeedSequence:
    spawn_key = tuple(int(k) for k in keys)
    if seed < 0 or any(k < 0 for k in spawn_key):
        raise ValueError(f"seed and stream keys must be non-negative, got {seed} {spawn_key}")
    return np.random.SeedSequence(entropy=int(seed), spawn_key=spawn_key)


def substream(seed: int, *keys: int) -> torch.Generator:
    """
    Build a torch generator for the sub-stream keyed by (seed, *keys).

    Two calls with the same key tuple return generators producing identical
    draws, independent of how many other streams were consumed in between.

    Args:
        seed: Master seed (non-negative 64-bit integer).
        keys: Non-negative integers naming the sub-stream (epoch, step, split...).

    Returns:
        A freshly seeded CPU torch.Generator.
    """
    state = _seed_sequence(seed, keys).generate_state(1, dtype=np.uint64)[0]
    generator = torch.Generator()
    generator.manual_seed(int(state))
    return generator


def np_substream(seed: int, *keys: int) -> np.random.Generator:
    """NumPy counterpart of substream, used for dataset generation and noise."""
    return np.random.default_rng(_seed_sequence(seed, keys))


def stable_hash(text: str, length: int = 12) -> str:
    """Short deterministic hex digest of a string."""
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:length]


@dataclass(frozen=True)
class SeededStream:
    """A master seed plus a key prefix; hands out keyed sub-stream generators."""

    seed: int
    keys: Tuple[int, ...] = ()

    def child(self, *keys: int) -> "SeededStream":
        return SeededStream(self.seed, self.keys + tuple(int(k) for k in keys))

    def generator(self, *keys: int) -> torch.Generator:
        return substream(self.seed, *self.keys, *keys)

    def numpy(self, *keys: int) -> np.random.Generator:
        return np_substream(self.seed, *self.keys, *keys)
