"""Skeleton-graph gesture classification and sliding-window segmentation of
continuous two-hand keypoint streams, in plain numpy."""

__version__ = "0.1.0"
