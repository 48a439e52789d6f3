"""Semi-supervised node classification with differentiated decision factors."""

__version__ = "0.1.0"
