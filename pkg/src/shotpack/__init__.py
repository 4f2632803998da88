"""Many-shot in-context fine-tuning on a small numpy transformer."""

__version__ = "0.1.0"
