"""armflow - single-step MeanFlow reaction generation, online and offline."""

__version__ = "0.1.0"
