"""Transformation-complexity toolkit: gate extraction, entropy/TC estimation,
and minimum-complexity training for small ReLU networks."""

__version__ = "0.1.0"
