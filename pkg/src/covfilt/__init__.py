"""Covfilt: learned multivariate measurement covariances for Kalman filtering."""

__version__ = "1.0.0"
