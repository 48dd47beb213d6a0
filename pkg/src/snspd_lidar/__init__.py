"""Photon-counting time-of-flight lidar simulator built around a waveguide SNSPD model."""

__version__ = "0.1.0"
