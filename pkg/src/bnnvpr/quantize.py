"""Weight/activation quantizers and their straight-through gradient rules.

These are the numpy reference versions; the training graph in
:mod:`bnnvpr.train` wraps the same rules as autograd functions.
"""

from __future__ import annotations

import numpy as np

KBIT_CHOICES = (2, 4, 8)


class QuantizationError(ValueError):
    pass


def _finite(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise QuantizationError("cannot quantize non-finite values")
    return w


def sign_quantize(w) -> np.ndarray:
    """+1 where ``w >= 0``, else -1. Zero maps to +1."""
    w = _finite(w)
    return np.where(w >= 0, 1.0, -1.0)


def levels(k: int) -> np.ndarray:
    """The ``2**k`` evenly spaced values a k-bit weight can take in [-1, 1]."""
    n = (1 << k) - 1
    return 2.0 * np.arange(n + 1) / n - 1.0


def uniform_codes(x, k: int) -> np.ndarray:
    """Nearest-level code in ``0 .. 2**k - 1`` for values in [-1, 1]; ties round up."""
    n = (1 << k) - 1
    x = np.clip(_finite(x), -1.0, 1.0)
    return np.floor((x + 1.0) * 0.5 * n + 0.5).astype(np.int64)


def codes_to_values(codes, k: int) -> np.ndarray:
    n = (1 << k) - 1
    return 2.0 * np.asarray(codes, dtype=np.float64) / n - 1.0


def uniform_quantize(x, k: int) -> np.ndarray:
    return codes_to_values(uniform_codes(x, k), k)


def tanh_normalize(w) -> np.ndarray:
    """Squash with tanh and rescale so the largest magnitude becomes 1."""
    t = np.tanh(_finite(w))
    peak = np.abs(t).max() if t.size else 0.0
    return t / peak if peak > 0 else t


def kbit_codes(w, k: int) -> np.ndarray:
    if k == 1:
        return (sign_quantize(w) > 0).astype(np.int64)
    if k not in KBIT_CHOICES:
        raise QuantizationError(f"unsupported weight precision k={k}")
    return uniform_codes(tanh_normalize(w), k)


def kbit_quantize(w, k: int) -> np.ndarray:
    """DoReFa-style k-bit weights: tanh-normalize, then round to ``2**k`` levels.

    ``k == 1`` falls back to :func:`sign_quantize`.
    """
    if k == 1:
        return sign_quantize(w)
    return codes_to_values(kbit_codes(w, k), k)


def ste_weight_grad(upstream_grad) -> np.ndarray:
    """Gradient reaching the full-precision proxy: the quantized-weight gradient as is."""
    return np.array(upstream_grad, dtype=np.float64, copy=True)


def ste_activation_grad(upstream_grad, pre_activation) -> np.ndarray:
    """Pass the gradient where ``|a| <= 1`` and cancel it elsewhere."""
    g = np.asarray(upstream_grad, dtype=np.float64)
    a = np.asarray(pre_activation, dtype=np.float64)
    if g.shape != a.shape:
        raise ValueError(f"gradient shape {g.shape} != activation shape {a.shape}")
    return np.where(np.abs(a) <= 1.0, g, 0.0)


def clip_proxies(w, bound: float = 1.0) -> np.ndarray:
    return np.clip(w, -bound, bound)
