"""Densely semantic enhancement for domain-adaptive single-shot detection, at desk scale."""

import os

# kernel-internal threading is capped before numpy loads so reductions keep a fixed order
_threads = os.environ.get("DSEM_LAB_THREADS", "1")
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
