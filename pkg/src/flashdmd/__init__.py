"""Desk-scale timestep-aware distribution-matching distillation with
joint preference optimisation on analytic Gaussian-mixture teachers."""

__version__ = "0.1.0"
