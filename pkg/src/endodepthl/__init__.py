"""Self-supervised monocular depth estimation with a lightweight
CNN/cross-covariance-attention network and specular confidence masking."""

__version__ = "0.1.0"
