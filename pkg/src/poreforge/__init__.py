"""Multi-view pore-scale patch dataset forge and descriptor benchmark."""

__version__ = "0.1.0"
