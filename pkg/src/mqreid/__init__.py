"""Multi-query vehicle re-identification on synthetic data."""

__version__ = "0.1.0"
