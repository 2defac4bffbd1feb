"""Grade-sensitive confidence for ordinal multiple-instance classifiers."""

__version__ = "0.1.0"
