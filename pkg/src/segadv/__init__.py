"""Universal and image-dependent adversarial perturbations against a small segmentation network."""

__version__ = "0.1.0"
