"""World-model motion forecasting with a mixture-of-experts decoder."""

__version__ = "0.1.0"
