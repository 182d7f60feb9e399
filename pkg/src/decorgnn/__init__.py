"""Graph classifier training with decorrelating sample reweighting."""

__version__ = "0.1.0"
