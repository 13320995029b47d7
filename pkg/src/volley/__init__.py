"""Volunteer-computing scheduling, validation and credit policies with a
deterministic discrete-event simulator to exercise them."""

__version__ = "0.1.0"
