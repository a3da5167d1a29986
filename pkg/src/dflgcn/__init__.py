"""Skeleton action recognition with ST-GCN backbones, a discriminative
feature learning head and direction-invariant input features."""

__version__ = "0.1.0"
