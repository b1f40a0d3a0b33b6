"""Building-coverage estimation from multi-channel raster patches.

Pipeline: synthetic scene generation -> 50x50 patch extraction ->
quantile-head CNN trained on pinball loss -> patch- and tile-level
coverage reports.
"""

__version__ = "0.1.0"
