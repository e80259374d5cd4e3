"""Night-scene semantic segmentation via Retinex disentanglement.

Packages a minimal autodiff engine, an illumination/reflectance
disentanglement network trained with semantic constraints, an
illumination-aware fusion parser, a synthetic night-scene corpus with
known ground-truth decompositions, and the metrics/CLI around them.
"""

try:
    # single-threaded BLAS: faster for this workload's small matrices and
    # makes every reduction order fixed, so runs are bit-reproducible
    import threadpoolctl as _threadpoolctl

    _threadpoolctl.threadpool_limits(limits=1, user_api="blas")
except ImportError:  # pragma: no cover - determinism then relies on env vars
    pass

__version__ = "0.1.0"
