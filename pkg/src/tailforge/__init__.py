"""Two-stage training for class-imbalanced classification with metric-learning losses."""

__version__ = "0.1.0"
