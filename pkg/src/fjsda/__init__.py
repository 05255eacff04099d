"""Domain adaptation under factorizable joint shift."""

__version__ = "0.1.0"
