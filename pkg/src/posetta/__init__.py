"""Streaming test-time adaptation of a small 3D pose regressor on synthetic skeleton videos."""
__version__ = "0.1.0"
