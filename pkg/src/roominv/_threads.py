"""Thread-pool hygiene for the compute-heavy entry points.

BLAS worker threads spin-wait after each call and starve the numba parallel
regions they are interleaved with, which costs orders of magnitude on small
machines.  Wrapping the solver loops in a single-threaded-BLAS context keeps
both worlds fast; it is a no-op when threadpoolctl is unavailable.
"""

import contextlib

try:
    from threadpoolctl import threadpool_limits

    def single_threaded_blas():
        return threadpool_limits(limits=1, user_api="blas")
except ImportError:  # pragma: no cover
    def single_threaded_blas():
        return contextlib.nullcontext()
