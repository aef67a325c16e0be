"""Backend selection for the hot loops.

The compiled extension ``rlq._kernels`` is used when it imports; otherwise, or
when ``RLQ_PURE_PYTHON=1`` is set, the numpy implementations in
``rlq._fallback`` are used.  Both expose identical functions.
"""
import os

import numpy as np

from . import _fallback

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

OK, SINGULAR, BLOWUP = _fallback.OK, _fallback.SINGULAR, _fallback.BLOWUP

_backends = {"python": _fallback}
if _compiled is not None:
    _backends["compiled"] = _compiled

if _compiled is not None and os.environ.get("RLQ_PURE_PYTHON", "") not in ("1", "true", "yes"):
    _active = "compiled"
else:
    _active = "python"


def available_backends():
    return sorted(_backends)


def active_backend():
    return _active


def use_backend(name):
    """Switch backend globally; returns the previous name."""
    global _active
    if name not in _backends:
        raise ValueError(f"backend {name!r} not available (have {available_backends()})")
    prev, _active = _active, name
    return prev


def _impl():
    return _backends[_active]


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def riccati_sweep(A, B, C, D, Q, R, rates, G, h, frozen=None, guard=1e12):
    return _impl().riccati_sweep(_c(A), _c(B), _c(C), _c(D), _c(Q), _c(R), _c(rates), _c(G), float(h),
                                 None if frozen is None else _c(frozen), guard)


def linear_sweep(M, eta, xi, h, guard=1e12):
    return _impl().linear_sweep(_c(M), _c(eta), _c(xi), float(h), guard)


def euler_affine(x0, regimes, dW, h, A, B, C, D, b, sig, Q, R, q, r, S, G, g,
                 gain, offset, ref_gain, ref_offset, weight, guard=1e12):
    return _impl().euler_affine(
        _c(x0), np.ascontiguousarray(regimes, dtype=np.int64), _c(dW), float(h),
        _c(A), _c(B), _c(C), _c(D), _c(b), _c(sig), _c(Q), _c(R), _c(q), _c(r), _c(S), _c(G), _c(g),
        _c(gain), _c(offset), _c(ref_gain), _c(ref_offset), _c(weight), guard)
