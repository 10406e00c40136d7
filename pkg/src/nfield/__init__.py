"""Continuous neural field representation of gridded scalar data, with
station-supervised bias correction, zero-shot downscaling, and off-grid
point queries, verified against seeded analytic synthetic scenarios."""

__version__ = "0.1.0"
