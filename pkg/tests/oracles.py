"""Reference computations that share no code with the package under test."""

from __future__ import annotations

import numpy as np


def pad_same(x: np.ndarray, kernel: int, stride: int, value: float) -> np.ndarray:
    h, w, _ = x.shape

    def amounts(n):
        out = -(-n // stride)
        total = max((out - 1) * stride + kernel - n, 0)
        return total // 2, total - total // 2

    return np.pad(x, (amounts(h), amounts(w), (0, 0)), constant_values=value)


def shift_add_conv(
    x: np.ndarray, w: np.ndarray, stride: int, padding: str, pad_value: float = 0.0, dtype=np.float64
) -> np.ndarray:
    """Convolution by summing one kernel tap at a time.

    ``x`` is H x W x C_in, ``w`` is C_out x k x k x C_in. float32 is exact for
    ±1 operands while sums stay below 2**24.
    """
    x = np.asarray(x, dtype=dtype)
    w = np.asarray(w, dtype=dtype)
    c_out, k, _, c_in = w.shape
    if padding == "same":
        x = pad_same(x, k, stride, pad_value)
    ho = (x.shape[0] - k) // stride + 1
    wo = (x.shape[1] - k) // stride + 1
    out = np.zeros((ho * wo, c_out), dtype=dtype)
    for dy in range(k):
        for dx in range(k):
            tap = x[dy : dy + stride * (ho - 1) + 1 : stride, dx : dx + stride * (wo - 1) + 1 : stride]
            out += tap.reshape(ho * wo, c_in) @ w[:, dy, dx, :].T
    return out.reshape(ho, wo, c_out).astype(np.float64)


def loop_conv(x: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    """Plain nested-loop valid convolution for tiny inputs."""
    c_out, k, _, _ = w.shape
    ho = (x.shape[0] - k) // stride + 1
    wo = (x.shape[1] - k) // stride + 1
    out = np.zeros((ho, wo, c_out))
    for i in range(ho):
        for j in range(wo):
            patch = x[i * stride : i * stride + k, j * stride : j * stride + k]
            for o in range(c_out):
                out[i, j, o] = float(np.sum(patch * w[o]))
    return out


def bn_then_sign(x, gamma, beta, mean, var, eps):
    """+1/-1 from an explicit normalization followed by sign (0 -> +1)."""
    y = np.asarray(gamma, np.float64) * (x - mean) / np.sqrt(np.asarray(var, np.float64) + eps) + beta
    return np.where(y >= 0, 1.0, -1.0), y


def loop_max_pool(x: np.ndarray, k: int, s: int) -> np.ndarray:
    ho = (x.shape[0] - k) // s + 1
    wo = (x.shape[1] - k) // s + 1
    out = np.empty((ho, wo, x.shape[2]), dtype=x.dtype)
    for i in range(ho):
        for j in range(wo):
            for c in range(x.shape[2]):
                out[i, j, c] = max(x[i * s + a, j * s + b, c] for a in range(k) for b in range(k))
    return out
