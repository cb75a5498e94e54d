"""Cascaded full-body pose regression from single depth images."""
__version__ = "0.1.0"
