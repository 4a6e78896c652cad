"""Friction-adaptive descent: dynamics, integrators, diagnostics and experiments."""

__version__ = "0.1.0"
