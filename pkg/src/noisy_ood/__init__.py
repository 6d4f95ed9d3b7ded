"""Training-time noise injection and ID/OOD gap measurement on synthetic multi-source images."""

__version__ = "0.1.0"
