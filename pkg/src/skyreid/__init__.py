"""Video person re-identification across aerial and ground platforms.

Desk-scale framework: a synthetic cloth-changing benchmark, a memory-enhanced
appearance branch, multi-granularity temporal modeling, a prior-regularized
shape branch, and a tracklet-retrieval evaluation harness.
"""

__version__ = "0.1.0"
