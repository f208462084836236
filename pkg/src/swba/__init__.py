"""Square-root sliding-window bundle adjustment with flat-QR marginalization."""

__version__ = "0.1.0"
