"""Delay-aware fronthaul and power allocation for a cloud radio access network cluster."""

__version__ = "0.1.0"
