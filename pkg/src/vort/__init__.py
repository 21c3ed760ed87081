"""Variable-order retention memory: fractional kernels, exponential-sum banks and keyed retrieval."""

__version__ = "0.1.0"
