"""Fairness-aware GNN training with dynamic demographic-group migration."""

__version__ = "0.1.0"

from ._accel import BACKEND  # noqa: E402,F401
