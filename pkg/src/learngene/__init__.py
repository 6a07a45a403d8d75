"""Desk-scale pipeline for condensing a trained ancestry network into a
compact, transferable learngene and growing descendant networks from it."""

__version__ = "0.1.0"
