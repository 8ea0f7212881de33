"""Hyper-network-generated LoRA adapters for a frozen transformer encoder, with calibration metrics."""

__version__ = "0.1.0"
