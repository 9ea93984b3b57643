"""Hot kernels: compiled Cython core when built, numpy fallback otherwise.

Set ``DOSEPRED_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _pykernels as pure

compiled = None
if os.environ.get("DOSEPRED_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as compiled
    except ImportError:  # extension not built
        compiled = None

impl = compiled if compiled is not None else pure
BACKEND = "cython" if compiled is not None else "numpy"

vol2col = impl.vol2col
col2vol = impl.col2vol
upsample2x = impl.upsample2x
upsample2x_adjoint = impl.upsample2x_adjoint
radiological_depths = impl.radiological_depths
direct_conv = impl.direct_conv
direct_conv_bwd = impl.direct_conv_bwd

__all__ = ["BACKEND", "vol2col", "col2vol", "upsample2x", "upsample2x_adjoint",
           "radiological_depths", "direct_conv", "direct_conv_bwd", "pure", "compiled"]
