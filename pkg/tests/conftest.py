"""Pin BLAS/OpenMP to one thread before numpy loads anywhere, so timing
checks measure single-threaded work and results are scheduler-independent."""

import os

for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
            "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
    os.environ.setdefault(var, "1")
