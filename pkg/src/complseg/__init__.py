"""Training one multi-class segmentation model from complementary binary datasets."""

__version__ = "0.1.0"
