"""Pin numeric work to one thread before numpy loads.

Timing assertions in the acceptance battery claim single-threaded
performance, and BLAS thread pools add run-to-run jitter everywhere else.
Must run before the first numpy import; pytest loads conftest ahead of
the test modules, which is early enough.
"""

import os

for _var in (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
):
    os.environ[_var] = "1"
