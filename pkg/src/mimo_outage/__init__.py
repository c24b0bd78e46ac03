"""Outage probability of MIMO interference channels under Gaussian CSI error."""
__version__ = "0.1.0"
