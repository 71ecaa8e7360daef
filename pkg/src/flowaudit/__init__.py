"""Privacy audit of app network traffic against privacy-policy statements."""

__version__ = "0.1.0"
