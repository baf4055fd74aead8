"""Planar quadruped hopping/bounding: simulator, PPO and evaluation protocols."""
__version__ = "0.1.0"
