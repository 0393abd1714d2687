"""Point-wise segmentation of imbalanced LiDAR scenes with class-weighted loss
and self-incremental (rare-classes-first) training, in plain numpy."""

__version__ = "0.1.0"
