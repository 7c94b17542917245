"""Bimodal graph attention networks for outage-duration classification on county graphs."""

__version__ = "0.1.0"
