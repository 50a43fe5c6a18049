"""Anti-learning perturbations for protecting image datasets from unauthorized training."""

__version__ = "0.1.0"
