"""Annotations, synthetic data, label rasterization and augmentation."""
