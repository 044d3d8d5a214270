"""invgp: learning data-augmentation invariances by maximizing a sparse-GP
evidence lower bound, optionally on top of a small neural feature extractor."""

__version__ = "0.1.0"
