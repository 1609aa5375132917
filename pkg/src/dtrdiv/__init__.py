"""Power divergences on Q-function space and minimum-divergence policy estimation."""

__version__ = "0.1.0"
