"""Direct-collocation optimal control with external constraint handling."""

__version__ = "0.1.0"
