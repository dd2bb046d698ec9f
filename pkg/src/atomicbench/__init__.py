"""Benchmarks, an analytical performance model, and a coherence simulator
for atomic memory operations (compare-and-swap, fetch-and-add, swap).
"""

__version__ = "0.1.0"
