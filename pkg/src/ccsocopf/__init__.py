"""Chance-constrained second-order-cone optimal power flow."""

from pathlib import Path

DATA_DIR = Path(__file__).parent / "data"

__version__ = "0.1.0"
