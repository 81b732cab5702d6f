"""Head-level visual-neglect probes and gated visual-recall intervention on a
toy multimodal transformer."""

__version__ = "0.1.0"
