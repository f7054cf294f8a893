"""One-stream transformer tracker with grouped-token attention gating."""

__version__ = "0.1.0"
