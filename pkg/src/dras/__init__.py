"""Dual-reference age synthesis: one image supplies the identity, a second
supplies the target age, and a conditional generator produces the combined
face."""

__version__ = "0.1.0"
