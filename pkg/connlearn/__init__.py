"""
connlearn: adaptive functional/effective connectivity learning for
brain-disorder classification from BOLD time series.
"""

__version__ = "0.1.0"
