"""Identity-preserving multi-domain translation for cross-domain person re-ID."""

__version__ = "0.1.0"
