"""Kernel backend selection.

The compiled extension (``_ckernels``, built from Cython at install time)
is used when importable; otherwise the pure-numpy fallback takes over.
Set ``POSENET_KERNELS=python`` or ``POSENET_KERNELS=compiled`` to force a
backend (the latter raises if the extension is missing).
"""

import os

_requested = os.environ.get("POSENET_KERNELS", "auto")

if _requested == "python":
    from posenet.kernels import _pykernels as _impl

    BACKEND = "python"
elif _requested in ("auto", "compiled"):
    try:
        from posenet.kernels import _ckernels as _impl  # type: ignore[attr-defined]

        BACKEND = "compiled"
    except ImportError:
        if _requested == "compiled":
            raise
        from posenet.kernels import _pykernels as _impl

        BACKEND = "python"
else:
    raise ValueError(f"unknown POSENET_KERNELS value: {_requested!r}")

dw_conv1d_forward = _impl.dw_conv1d_forward
dw_conv1d_backward = _impl.dw_conv1d_backward
scatter_add_rows = _impl.scatter_add_rows
masked_softmax = _impl.masked_softmax
softmax_backward = _impl.softmax_backward
layer_norm_forward = _impl.layer_norm_forward
layer_norm_backward = _impl.layer_norm_backward
