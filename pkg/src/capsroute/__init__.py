"""Capsule routing by pairwise-product agreement.

A numpy library for routing between capsule layers: linear-time FM agreement
with its brute-force pair-enumeration oracle and closed-form activation, the
iterative dynamic-routing baseline, matrix-transform capsule layers with
batch normalization, margin and cross-entropy losses, a fixed-graph reverse-
mode tape, IDX data loading and synthetic instance generation, a statistical
micro-benchmark harness, and a CLI (``capsroute verify|bench|train|gradcheck``).

Set ``CAPSROUTE_THREADS`` before importing to cap BLAS/OpenMP parallelism;
the routing kernels themselves are single-threaded numpy ufunc loops.
"""

import os as _os

_threads = _os.environ.get("CAPSROUTE_THREADS")
if _threads:
    for _var in (
        "OPENBLAS_NUM_THREADS",
        "OMP_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
    ):
        _os.environ.setdefault(_var, _threads)

from .routing import (  # noqa: E402
    DynamicRoutingConfig,
    RoutingResult,
    dynamic_routing,
    fm_activation_closed_form,
    fm_activation_jacobian,
    fm_agreement,
    fm_agreement_backward,
    fm_agreement_bruteforce,
    l2_normalize_predictions,
    squash,
)
from .tensor import as_tensor, elementwise_mul, l2_norm, matmul_small, reduce_sum  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "DynamicRoutingConfig",
    "RoutingResult",
    "dynamic_routing",
    "fm_activation_closed_form",
    "fm_activation_jacobian",
    "fm_agreement",
    "fm_agreement_backward",
    "fm_agreement_bruteforce",
    "l2_normalize_predictions",
    "squash",
    "as_tensor",
    "elementwise_mul",
    "l2_norm",
    "matmul_small",
    "reduce_sum",
    "__version__",
]
