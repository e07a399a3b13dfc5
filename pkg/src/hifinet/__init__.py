"""Forgery detection, mask localization and tree-structured attribution on
small synthetic images, built on a numpy autodiff engine."""

__version__ = "0.1.0"
