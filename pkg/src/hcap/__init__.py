"""History-based capabilities: security automata carried in signed tickets."""

__version__ = "0.1.0"
