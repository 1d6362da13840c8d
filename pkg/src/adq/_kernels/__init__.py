"""Hot-kernel dispatch: compiled extension when built, numpy fallback otherwise.

Set ADQ_PURE_PYTHON=1 to force the numpy reference kernels even when the
extension is available (used by the benchmark and the equivalence tests).
Both backends are single-threaded and bit-identical, so the choice never
changes numerical results.
"""

import os

from . import numpy_ref

if os.environ.get("ADQ_PURE_PYTHON") == "1":
    _impl = numpy_ref
    BACKEND = "numpy"
else:
    try:
        from . import _core as _impl
        BACKEND = "compiled"
    except ImportError:
        _impl = numpy_ref
        BACKEND = "numpy"

im2col = _impl.im2col
col2im = _impl.col2im
assign_nearest = _impl.assign_nearest
act_forward_levels = _impl.act_forward_levels
act_backward_elems = _impl.act_backward_elems
