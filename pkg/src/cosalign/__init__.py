"""Class-wise cosine-similarity feature alignment for domain-adaptive segmentation."""

__version__ = "0.1.0"
