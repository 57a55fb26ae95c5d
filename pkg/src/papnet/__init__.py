"""Cervical cell classification from RGB appearance plus nucleus/cytoplasm masks."""
__version__ = "0.1.0"
