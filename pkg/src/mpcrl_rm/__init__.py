"""MPC-based reinforcement learning for freeway ramp metering."""

__version__ = "0.1.0"
