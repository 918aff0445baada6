"""CTC-mask non-autoregressive speech recognition for code-switching, on numpy."""

__version__ = "0.1.0"
