"""Self-supervised dense correspondence with semantic-masked softargmax matching."""

__version__ = "0.1.0"
