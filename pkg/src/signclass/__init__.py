"""Sign classification toolkit for impressed cuneiform writing."""

__version__ = "0.1.0"
