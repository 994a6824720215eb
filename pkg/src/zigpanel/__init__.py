"""Zero-inflated Gamma fixed-effects GLMs for daily wallet transaction panels."""

__version__ = "0.1.0"
