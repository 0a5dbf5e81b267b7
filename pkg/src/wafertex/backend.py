"""Kernel backend selection.

The convolution, gradient, and upsampling inner loops exist twice: as a
compiled Cython extension (``wafertex._native``) and as numpy fallbacks
(``wafertex._kernels_py``).  The compiled core is preferred when importable;
set ``WAFERTEX_KERNELS=python`` or ``=compiled`` to force a choice (forcing
``compiled`` raises if the extension was never built).  Selection happens once
at import, so a process uses one backend throughout -- a requirement for the
byte-reproducibility contract of the CLI.

``benchmarks/bench_kernels.py`` compares the two backends head to head.
"""

from __future__ import annotations

import os

from wafertex import _kernels_py

_choice = os.environ.get("WAFERTEX_KERNELS", "auto")
if _choice not in ("auto", "compiled", "python"):
    raise ValueError(
        f"WAFERTEX_KERNELS must be auto, compiled, or python, got {_choice!r}"
    )

if _choice == "python":
    _impl = _kernels_py
else:
    try:
        from wafertex import _native as _impl  # type: ignore[no-redef]
    except ImportError:
        if _choice == "compiled":
            raise ImportError(
                "WAFERTEX_KERNELS=compiled but the wafertex._native extension "
                "is not built; run `pip install -e . --no-build-isolation`"
            ) from None
        _impl = _kernels_py


def backend_name() -> str:
    """Name of the active kernel backend: ``compiled`` or ``python``."""
    return "compiled" if _impl.__name__.endswith("_native") else "python"


conv2d_forward = _impl.conv2d_forward
conv2d_input_grad = _impl.conv2d_input_grad
upsample_nearest = _impl.upsample_nearest
grad_magnitude = _impl.grad_magnitude
