"""Multi-instance partial-label learning with calibration-aware disambiguation losses."""

__version__ = "0.1.0"
