"""Quality-aware imitation learning on a toy dual-arm world."""

__version__ = "0.1.0"
