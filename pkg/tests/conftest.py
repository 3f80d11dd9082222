"""Pin BLAS to one thread before numpy loads anywhere in the test run.

Multi-threaded GEMM reorders float accumulation, which would break the
bit-identical rerun guarantees the suite asserts.
"""

import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")
