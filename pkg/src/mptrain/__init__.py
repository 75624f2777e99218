"""Mixed-precision training engine with software-emulated binary16."""

__version__ = "0.1.0"
