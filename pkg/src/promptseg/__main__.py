import os
import sys

# single-threaded BLAS keeps training bit-reproducible
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

from .cli import main  # noqa: E402

sys.exit(main())
