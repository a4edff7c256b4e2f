"""Map-based path-loss modeling from DSM path profiles."""

__version__ = "0.1.0"
