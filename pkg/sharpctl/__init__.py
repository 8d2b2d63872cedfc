"""
sharpctl - sharpness measures, LPF-SGD and generalization-correlation sweeps.
"""

__version__ = "1.0.0"
__author__ = "sharpctl Team"

from sharpctl.config import Config
from sharpctl.db import init_db

__all__ = ["init_db", "Config"]
