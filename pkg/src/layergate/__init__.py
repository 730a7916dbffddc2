"""Layer-importance gating for transformer fine-tuning at desk scale."""

__version__ = "0.1.0"
