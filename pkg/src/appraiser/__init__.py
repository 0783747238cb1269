"""Fault resilience analysis of int8 CNNs: statistical bitflip fault injection
vs single-pass assessment with approximate multipliers."""

__version__ = "0.1.0"
