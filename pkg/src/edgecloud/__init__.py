"""Reconfigurable edge-cloud video surveillance: library and discrete-event simulator."""

__version__ = "0.1.0"
