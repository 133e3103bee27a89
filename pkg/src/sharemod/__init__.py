"""Learned shared-modality transforms for SAR/optical co-registration."""

__version__ = "0.1.0"
