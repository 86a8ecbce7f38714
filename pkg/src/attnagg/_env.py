"""Thread-count pinning. Must be imported before numpy.

``ATTNAGG_THREADS`` caps BLAS worker threads (default 1 so repeated runs are
bit-exact). Only takes effect if the corresponding env vars are not already
set by the user.
"""

import os

_threads = os.environ.get("ATTNAGG_THREADS", "1")
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, _threads)
