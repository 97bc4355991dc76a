"""Low-depth polynomial CNN toolkit: graph IR, fusing and redistribution
passes, level planning with sublevels, parameter clustering, and an exact
fixed-point SIMD simulator."""

__version__ = "0.1.0"
