"""Desk-scale joint global pose regression and visual odometry."""

__version__ = "0.1.0"
