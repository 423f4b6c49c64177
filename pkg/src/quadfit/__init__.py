"""quadfit: articulated quadruped mesh fitting from per-frame 2D video cues."""

__version__ = "0.1.0"
