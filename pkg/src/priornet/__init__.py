"""Prior-guided engagement estimation: placeholder clips, LoRA adaptation, evidential loss."""

__version__ = "0.1.0"
