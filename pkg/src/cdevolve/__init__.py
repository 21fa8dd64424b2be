"""Contract-gated evolutionary search for drag-coefficient surrogate pipelines."""

__version__ = "0.1.0"
