"""Differentiable triangle-soup radiance fields on the CPU."""
import os

# the TBB layer shipped with many distros is too old for numba and only warns
os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

WORKERS_ENV = "TRISOUP_WORKERS"


def set_workers(n=None):
    """Limit numba kernel threads (defaults to $TRISOUP_WORKERS when set)."""
    import numba

    if n is None:
        n = os.environ.get(WORKERS_ENV)
        if not n:
            return numba.get_num_threads()
    n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)
    return n


from .camera import Camera, look_at  # noqa: E402
from .config import TrainConfig  # noqa: E402
from .rasterizer import RasterSettings, RenderOutput, render, render_backward  # noqa: E402
from .soup import SparseSeed, TriangleSoup, init_from_points  # noqa: E402

__version__ = "0.1.0"
__all__ = ["Camera", "look_at", "TrainConfig", "RasterSettings", "RenderOutput", "render",
           "render_backward", "SparseSeed", "TriangleSoup", "init_from_points", "set_workers"]
