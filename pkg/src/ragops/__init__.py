"""ragops: operate retrieval-augmented generation pipelines end to end.

Ingestion and verification of external data, a versioned data lake with
incremental retrieval indexes, guarded query processing with complete
tracing, three-level offline evaluation, coverage checking against live
traffic, and shadow/A-B/staged rollout.
"""

__version__ = "0.1.0"

from .kernels import BACKEND as KERNEL_BACKEND  # noqa: F401
