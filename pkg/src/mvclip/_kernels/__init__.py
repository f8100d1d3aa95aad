"""Hot image kernels used by :mod:`mvclip.preprocess`.

The compiled Cython module is used when it was built; otherwise the numpy
fallback is imported. Set ``MVCLIP_PURE_PYTHON=1`` to force the fallback.
``BACKEND`` names the active implementation.
"""

import os

from mvclip._kernels import _fallback

if os.environ.get("MVCLIP_PURE_PYTHON", "") not in ("", "0"):
    _impl = _fallback
    BACKEND = "python"
else:
    try:
        from mvclip._kernels import _fast as _impl

        BACKEND = "cython"
    except ImportError:
        _impl = _fallback
        BACKEND = "python"

percentiles_u16 = _impl.percentiles_u16
rescale_u16_to_u8 = _impl.rescale_u16_to_u8
bilinear_resize_u8 = _impl.bilinear_resize_u8

__all__ = ["BACKEND", "percentiles_u16", "rescale_u16_to_u8", "bilinear_resize_u8"]
