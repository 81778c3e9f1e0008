"""Large-scale point-cloud semantic segmentation with random sampling and
local feature aggregation, implemented on numpy."""

__version__ = "0.1.0"
