"""Joint occlusion completion and super-resolution with a compound generator."""

__version__ = "0.1.0"
