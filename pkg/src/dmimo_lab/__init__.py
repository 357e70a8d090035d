"""Desk-scale laboratory for distributed-MIMO downlink precoding."""

__version__ = "0.1.0"
