"""Hot per-client kernels with a compiled core and a numpy fallback.

The compiled Cython extension is preferred when it was built; otherwise the
numpy reference implementation is used. Set FEDMVMF_KERNELS=python to force
the fallback (useful for benchmarking and for cross-checking backends).
"""

from __future__ import annotations

import os

from fedmvmf.kernels import _reference

if os.environ.get("FEDMVMF_KERNELS", "").lower() == "python":
    _impl = _reference
else:
    try:
        from fedmvmf.kernels import _fast as _impl  # type: ignore[no-redef]
    except ImportError:
        _impl = _reference

BACKEND = _impl.BACKEND
client_gradients = _impl.client_gradients
p_normal_terms = _impl.p_normal_terms

__all__ = ["BACKEND", "client_gradients", "p_normal_terms"]
