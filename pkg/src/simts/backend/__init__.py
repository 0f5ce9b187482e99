"""Kernel backend selection.

The compiled extension (`simts._ckernels`) is preferred when it imported
cleanly; otherwise the numpy reference implementation is used.  Set
SIMTS_BACKEND=reference or SIMTS_BACKEND=compiled to force one explicitly
(forcing `compiled` raises if the extension is missing).
"""

import os

from simts.backend import reference

_requested = os.environ.get("SIMTS_BACKEND", "").strip().lower()

_compiled = None
if _requested != "reference":
    try:
        from simts import _ckernels as _compiled
    except ImportError:
        _compiled = None
        if _requested == "compiled":
            raise

_active = _compiled if _compiled is not None else reference

NAME = _active.NAME
conv1d_fwd = _active.conv1d_fwd
conv1d_bwd = _active.conv1d_bwd
conv1d_last_fwd = reference.conv1d_last_fwd
conv1d_last_bwd = reference.conv1d_last_bwd
sgd_update = _active.sgd_update
