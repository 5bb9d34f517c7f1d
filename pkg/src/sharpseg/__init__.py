"""Sharp U-Net style segmentation: a small numpy library with its own
reverse-mode autograd, training/cross-validation harness, synthetic data
generator, and Grad-CAM visualization."""

from . import autograd, data, metrics, model, ops, train

__all__ = ["ops", "autograd", "model", "train", "metrics", "data"]
__version__ = "0.1.0"
