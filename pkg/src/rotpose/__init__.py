"""Near-metric structure from motion: pOSE with relative-rotation penalties."""

__version__ = "0.1.0"
