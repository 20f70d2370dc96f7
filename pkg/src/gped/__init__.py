"""Generalized posterior expectation distillation (GPED) with SGLD teachers."""

__version__ = "0.1.0"
