"""Dynamic-scene Gaussian splatting with superpoint-driven rigid deformation."""

__version__ = "0.1.0"
