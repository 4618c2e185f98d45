"""Desk-scale laboratory for activation sparsity in ReLU MLPs and transformer encoders."""

__version__ = "0.1.0"
