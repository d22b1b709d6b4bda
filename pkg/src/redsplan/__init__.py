"""Highway motion planning with an exact mixed-integer expert and learned binary prediction."""

__version__ = "0.1.0"
