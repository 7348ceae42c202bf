"""sparselets: sparse edge coding of natural images on a log-Gabor pyramid"""

__version__ = "0.3.0"
