"""Facial action unit detection across partially labeled datasets with
masked loss training, plus rule-based clinical phenotyping and
mixed-effects association analysis."""

__version__ = "0.1.0"
