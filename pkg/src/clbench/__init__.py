"""Continual-learning strategies on class-incremental scenarios, in numpy."""
from . import data, eval, experiment, linalg, nn, strategies, toy  # noqa: F401

__version__ = "0.1.0"
