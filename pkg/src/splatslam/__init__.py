"""LiDAR-visual SLAM on a map of anisotropic 3D Gaussians."""

__version__ = "0.1.0"
