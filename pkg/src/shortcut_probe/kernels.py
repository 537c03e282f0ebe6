"""Backend selection for the convolution kernels.

The compiled extension is used when it imports; otherwise the numpy versions
are used. Set ``SHORTCUT_PROBE_PURE=1`` to force the numpy path.
"""

import os

from . import _kernels_py

BACKEND = "numpy"
_impl = _kernels_py

if os.environ.get("SHORTCUT_PROBE_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"

im2col3x3 = _impl.im2col3x3
col2im3x3 = _impl.col2im3x3
avgpool2x2 = _impl.avgpool2x2
avgpool2x2_backward = _impl.avgpool2x2_backward

__all__ = ["BACKEND", "im2col3x3", "col2im3x3", "avgpool2x2", "avgpool2x2_backward"]
