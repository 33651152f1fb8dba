"""Control of a logical qubit under drifting, long-memory noise."""

__version__ = "0.1.0"
