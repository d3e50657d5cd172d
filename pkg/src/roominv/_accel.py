"""Kernel dispatch: numba-compiled hot loops with a pure-numpy fallback.

Set ``ROOMINV_DISABLE_NUMBA=1`` in the environment (before import) to force
the numpy path; it is also taken automatically when numba is unavailable.
``backend_name()`` reports which path is active.
"""

import os

_DISABLED = os.environ.get("ROOMINV_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")

if not _DISABLED:
    try:
        from . import _kernels_numba as _impl
        _BACKEND = "numba"
    except ImportError:
        from . import _kernels_numpy as _impl
        _BACKEND = "numpy"
else:
    from . import _kernels_numpy as _impl
    _BACKEND = "numpy"

synth_rir = _impl.synth_rir
slide_obj_grad = _impl.slide_obj_grad
cert_num = _impl.cert_num
cert_num_grad = _impl.cert_num_grad
cert_norm_grad = _impl.cert_norm_grad
scan_points = _impl.scan_points
j3_many = _impl.j3_many
j3_grad_sph = _impl.j3_grad_sph
j2_many = _impl.j2_many
j2_grad = _impl.j2_grad
count_orth = _impl.count_orth


def backend_name() -> str:
    return _BACKEND
