"""Learning-based delay-aware caching for D2D cellular networks."""

from d2dcache.caching import CacheMatrix, run_caching
from d2dcache.channel import DelayState, SystemParams, Topology
from d2dcache.intensity import (
    IntensityEstimate,
    SampleSet,
    corrected_kernel,
    epanechnikov,
    estimate_intensity,
    expected_requests,
    ise_score,
    select_bandwidth,
)

__version__ = "0.1.0"

__all__ = [
    "CacheMatrix",
    "DelayState",
    "IntensityEstimate",
    "SampleSet",
    "SystemParams",
    "Topology",
    "corrected_kernel",
    "epanechnikov",
    "estimate_intensity",
    "expected_requests",
    "ise_score",
    "run_caching",
    "select_bandwidth",
]
