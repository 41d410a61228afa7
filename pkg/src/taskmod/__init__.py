"""Task-aware Mixture-of-Depths token pruning for two-task toy transformers."""

__version__ = "0.1.0"
