"""Visual prompt tuning for multi-center 3D segmentation."""

__version__ = "0.1.0"
