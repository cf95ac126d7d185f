"""Class-incremental learning benchmark for online bin-packing solver selection."""

__version__ = "0.1.0"
