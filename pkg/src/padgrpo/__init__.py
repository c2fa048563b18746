"""GRPO with prioritized advantage distillation on toy autoregressive policies."""

__version__ = "0.1.0"
