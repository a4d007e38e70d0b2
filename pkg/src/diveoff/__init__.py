"""Diverse-behavior offline RL (DiveOff) on a 2D point-mass path-planning task."""

__version__ = "0.1.0"
