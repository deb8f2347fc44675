"""Residual-objectness detector lab.

A small anchor-based detector trained end-to-end with a cascaded
objectness-refinement head, built to study foreground-background
imbalance on synthetic scenes.
"""

__version__ = "0.1.0"
