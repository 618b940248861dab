"""Transformer forecasting with a task-level relational memory, on a small numpy autodiff engine."""

__version__ = "0.1.0"
