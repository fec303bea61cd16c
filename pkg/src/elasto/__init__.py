"""Regularized ultrasound displacement tracking with mechanical priors."""

__version__ = "0.1.0"
