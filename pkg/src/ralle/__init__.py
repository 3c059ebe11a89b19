"""Robust codec language modeling with prosody chain-of-thought and duration-guided attention."""

__version__ = "0.1.0"

INF = None
"""Sentinel window size meaning "no window": every phoneme stays visible."""
