"""Learned-gain orientation estimation from gyroscope, accelerometer and magnetometer data."""

__version__ = "0.1.0"
