"""Sandboxed execution of untrusted state-collection plugins against container guests."""

__version__ = "0.1.0"
