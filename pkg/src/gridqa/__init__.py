"""Embodied question answering in a gridworld house, with marker calibration."""

__version__ = "0.1.0"
