"""Backend selection for the attack hot path.

The compiled extension is used when it was built and imports cleanly; the
numpy implementation is used otherwise, or when ``APTLAB_PURE_PYTHON=1``.
Both expose ``image_loss_grad`` and ``pgd_step`` with identical semantics.
"""

import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("APTLAB_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:
        pass
    else:
        _impl = _compiled
        BACKEND = "compiled"


def _pick(impl):
    if impl is None:
        return _impl
    if isinstance(impl, str):
        backends = available_backends()
        if impl not in backends:
            raise ValueError(f"backend {impl!r} unavailable; have {sorted(backends)}")
        return backends[impl]
    return impl


def image_loss_grad(x, w1, b1, w2, b2, text_features, inv_tau, labels, impl=None):
    """Per-example losses, per-example dL/dx and d(mean L)/d(text features)."""
    impl = _pick(impl)
    return impl.image_loss_grad(
        np.ascontiguousarray(x, dtype=np.float64),
        w1, b1, w2, b2,
        np.ascontiguousarray(text_features, dtype=np.float64),
        float(inv_tau),
        np.ascontiguousarray(labels, dtype=np.intp),
    )


def pgd_step(x, delta, grad, alpha, eps, impl=None):
    """Signed step on ``delta`` (in place), projected; returns the new images."""
    impl = _pick(impl)
    return impl.pgd_step(x, delta, np.ascontiguousarray(grad), float(alpha), float(eps))


def available_backends():
    """Mapping name -> implementation module for every importable backend."""
    out = {"python": _kernels_py}
    try:
        from . import _kernels as _compiled
    except ImportError:
        return out
    out["compiled"] = _compiled
    return out
