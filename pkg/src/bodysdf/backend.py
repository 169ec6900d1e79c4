"""Kernel backend selection: numba-jitted loops or pure-numpy fallbacks.

Set BODYSDF_BACKEND=numpy to force the fallback path (e.g. when numba is
unavailable or to cross-check results); default is numba when importable.
The flag is read once at import.
"""

import os

_env = os.environ.get("BODYSDF_BACKEND", "").strip().lower()

if _env not in ("", "numba", "numpy"):
    raise ValueError(f"BODYSDF_BACKEND must be 'numba' or 'numpy', got {_env!r}")

if _env == "numpy":
    _BACKEND = "numpy"
else:
    try:
        import numba  # noqa: F401

        _BACKEND = "numba"
    except ImportError:
        if _env == "numba":
            raise
        _BACKEND = "numpy"


def active_backend():
    """Name of the kernel backend selected at import: 'numba' or 'numpy'."""
    return _BACKEND
