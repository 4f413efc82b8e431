"""Modular deep Q-learning for planar reaching: perception and control joined at a scene-configuration bottleneck."""

__version__ = "0.1.0"
