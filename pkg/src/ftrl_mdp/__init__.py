"""FTRL over occupancy measures with a hybrid Tsallis / log-barrier regularizer."""

__version__ = "0.1.0"
