"""kernelbias: measuring the causal effect of first-layer kernel size on
out-of-distribution performance disparities across data subgroups."""

__version__ = "0.1.0"
