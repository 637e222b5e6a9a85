"""Off-policy evaluation on POMDPs with future-dependent value functions."""

__version__ = "0.1.0"
