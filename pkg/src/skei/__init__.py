"""Sketched equivariant imaging for unsupervised CT and MRI reconstruction."""
__version__ = "0.1.0"
