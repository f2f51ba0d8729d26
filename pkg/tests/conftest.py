"""Test session setup.

Pin BLAS to one thread before numpy loads: the matrices here are small
enough that threading only adds scheduling noise, and single-threaded
kernels keep runtime measurements meaningful on small CI boxes.
"""

import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
