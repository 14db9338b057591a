"""Monte Carlo basin-volume measurement for small neural networks."""

__version__ = "0.1.0"
