"""Windowed message-passing network performance model with a packet-level simulator."""

__version__ = "0.1.0"
