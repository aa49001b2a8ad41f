"""Hot kernels: ray casting, visibility-limited coverage, map marking, disk collision
the im2col/col2im lowering used by the convolution layers and 2-opt tour improvement.

The compiled extension is used when it is importable; otherwise the numpy
implementation is used. Set ``CPPRL_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _pykernels as python

compiled = None
if not os.environ.get("CPPRL_PURE_PYTHON"):
    try:
        from . import _ckernels as compiled
    except ImportError:  # extension not built
        compiled = None

backend = compiled if compiled is not None else python
BACKEND_NAME = "cython" if compiled is not None else "python"

raycast = backend.raycast
mark_rays = backend.mark_rays
cover = backend.cover
disk_collides = backend.disk_collides
im2col = backend.im2col
col2im = backend.col2im
two_opt = backend.two_opt

__all__ = ["raycast", "mark_rays", "cover", "disk_collides", "im2col", "col2im", "two_opt", "BACKEND_NAME", "python", "compiled"]
