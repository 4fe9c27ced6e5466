"""Joint imaging / ROI-graph representation learning with cross-view contrastive alignment."""

__version__ = "0.1.0"
