"""mgvo: a desk-scale federation of mammography Grid-boxes."""

__version__ = "0.1.0"
