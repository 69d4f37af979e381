"""Backend selection for the hot kernels.

The compiled extension is used when importable; set ``COVREG_PURE_PYTHON=1``
to force the numpy fallback.
"""

import os

from . import _fallback

if os.environ.get("COVREG_PURE_PYTHON") == "1":
    _impl = _fallback
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _fallback
        BACKEND = "python"

lasso_irls = _impl.lasso_irls
glm_newton = _impl.glm_newton
refit_targets = _impl.refit_targets

OK, MAX_ITER, OVERFLOW, STALLED, SINGULAR = (
    _fallback.OK, _fallback.MAX_ITER, _fallback.OVERFLOW, _fallback.STALLED, _fallback.SINGULAR)
STATUS_NAMES = {OK: "ok", MAX_ITER: "iteration cap", OVERFLOW: "exp overflow",
                STALLED: "line search stalled", SINGULAR: "singular design"}
