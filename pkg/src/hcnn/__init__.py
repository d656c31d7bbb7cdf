"""RNS-CKKS homomorphic encryption with packed CNN inference."""

__version__ = "0.1.0"
