"""Task addition for geometrically aligned transfer encoders (GATE), with MTL and single-task baselines."""

__version__ = "0.1.0"
