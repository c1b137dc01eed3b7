"""Fleet learning for desk-scale point-goal navigation."""

__version__ = "0.1.0"
