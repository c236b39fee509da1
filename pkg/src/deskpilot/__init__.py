"""Desk-scale end-to-end lane keeping: synthetic road world, camera model, a small
convolutional steering network trained from scratch, and a closed-loop simulator."""

__version__ = "0.1.0"
