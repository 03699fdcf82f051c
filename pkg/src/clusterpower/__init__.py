"""Power provisioning and runtime power management for GPU datacenters."""

__version__ = "0.1.0"
