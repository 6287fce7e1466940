"""Reduced-order FE² with POD and empirical hyper-integration."""

__version__ = "0.1.0"
