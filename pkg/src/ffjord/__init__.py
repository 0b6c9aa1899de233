"""Continuous normalizing flows with free-form dynamics and stochastic trace estimation."""

__version__ = "0.1.0"
