"""Map documents to points in a labeled 3D organ atlas, trained with the Soft Organ Distance loss."""

__version__ = "0.1.0"
