"""adq: a desk-scale quantization-aware-training laboratory.

Adaptive per-layer weight codebooks (quantile init + EMA centroid tracking),
learnable-threshold activation quantizers, and sensitivity-driven
mixed-precision bit allocation, on a self-contained dense-tensor autodiff
engine with a small CLI for running experiments.
"""
import os

# must run before numpy is first imported: single-threaded BLAS makes
# reduction order (and therefore metrics) reproducible across machines
if os.environ.get("ADQ_DETERMINISTIC") == "1":
    for _v in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS",
               "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(_v, "1")

__version__ = "0.1.0"
