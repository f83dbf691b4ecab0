"""Dense camouflaged-object segmentation on plain numpy: tensors, autograd, network, losses, metrics."""

__version__ = "0.1.0"
