"""Soft-prompt transfer on a frozen toy encoder: prompt-tuning, vanilla
prompt transfer, distillation-based transfer and transferability metrics."""

__version__ = "0.1.0"
