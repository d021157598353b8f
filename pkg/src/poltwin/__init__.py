"""Synthetic indoor patterns-of-life generation and neural surrogates for NPC behavior."""

from poltwin.vocab import Tag, UserClass

__version__ = "0.1.0"

__all__ = ["Tag", "UserClass", "__version__"]
