"""Few-shot time-series forecasting with attention over encoded support series."""

__version__ = "0.1.0"
