"""Meta-learned lane-change policies on a seeded IDM highway simulator."""

__version__ = "0.1.0"
