"""Angular contrastive loss laboratory: losses, encoder, metrics and training harnesses."""

__version__ = "0.1.0"
