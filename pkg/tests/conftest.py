import os

# Pin BLAS threading before numpy loads so matrix products are reproducible
# run-to-run regardless of the host's core count.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")
