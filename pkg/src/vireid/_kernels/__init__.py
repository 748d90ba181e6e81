"""Hot kernels, compiled when available.

The Cython extension ``_core`` is used when it imports; otherwise the numpy
versions in ``_fallback`` take over. Set ``VIREID_PURE_PYTHON=1`` to force
the fallback. ``BACKEND`` names the active implementation.
"""
import os

from . import _fallback

if os.environ.get("VIREID_PURE_PYTHON", "") not in ("", "0"):
    _impl = _fallback
else:
    try:
        from . import _core as _impl
    except ImportError:
        _impl = _fallback

BACKEND = "compiled" if _impl is not _fallback else "python"

extract_patches = _impl.extract_patches
layer_norm_forward = _impl.layer_norm_forward
layer_norm_backward = _impl.layer_norm_backward
gelu_forward = _impl.gelu_forward
gelu_backward = _impl.gelu_backward
ranking_stats = _impl.ranking_stats

__all__ = [
    "BACKEND",
    "extract_patches",
    "layer_norm_forward",
    "layer_norm_backward",
    "gelu_forward",
    "gelu_backward",
    "ranking_stats",
]
