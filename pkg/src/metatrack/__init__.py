"""Desk-scale meta-learned siamese segmentation tracker."""

__version__ = "0.1.0"
