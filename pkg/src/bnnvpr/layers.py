"""Inference-time layer kernels operating on single H x W x C maps.

Binary blocks run BatchNorm -> sign -> binary convolution -> pool, with the
BatchNorm and sign collapsed into a per-channel threshold compare. Spatial
padding of binarized maps uses -1 (bit 0) so every accumulator sums exactly
``k * k * C_in`` signed terms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .arch import same_padding
from .bitcore import WORD_BITS, BitTensor, DimensionError, pack_rows, unpack, xnor_matmul

BINARY_PAD_VALUE = -1.0


class DegenerateScaleError(ValueError):
    """BatchNorm scale of zero: the sign of the output no longer depends on x."""


@dataclass(frozen=True, eq=False)
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = 1e-5

    def __post_init__(self) -> None:
        for name in ("gamma", "beta", "mean", "var"):
            arr = np.array(getattr(self, name), dtype=np.float32).reshape(-1)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        n = self.gamma.size
        if not (self.beta.size == self.mean.size == self.var.size == n):
            raise DimensionError("BatchNorm parameter vectors differ in length")

    @property
    def channels(self) -> int:
        return self.gamma.size

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, BatchNormParams):
            return NotImplemented
        return self.eps == other.eps and all(
            np.array_equal(getattr(self, k), getattr(other, k))
            for k in ("gamma", "beta", "mean", "var")
        )

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Explicit normalization over the last axis, in float64."""
        g, b, m, v = (getattr(self, k).astype(np.float64) for k in ("gamma", "beta", "mean", "var"))
        return g * (x - m) / np.sqrt(v + self.eps) + b

    def folded(self) -> FoldedBatchNorm:
        return fold_batchnorm(self.gamma, self.beta, self.mean, self.var, self.eps)


@dataclass(frozen=True, eq=False)
class FoldedBatchNorm:
    threshold: np.ndarray
    direction: np.ndarray

    def binarize(self, x: np.ndarray) -> np.ndarray:
        """Boolean map, True for +1. The threshold point itself maps to +1."""
        up = x >= self.threshold
        down = x <= self.threshold
        return np.where(self.direction > 0, up, down)


def fold_batchnorm(gamma, beta, mean, var, eps: float = 1e-5) -> FoldedBatchNorm:
    """Collapse BatchNorm followed by sign into a threshold compare.

    ``gamma * (x - mean) / sqrt(var + eps) + beta >= 0`` holds exactly when
    ``x >= threshold`` for positive gamma and ``x <= threshold`` for negative.
    """
    gamma = np.asarray(gamma, dtype=np.float64).reshape(-1)
    beta = np.asarray(beta, dtype=np.float64).reshape(-1)
    mean = np.asarray(mean, dtype=np.float64).reshape(-1)
    var = np.asarray(var, dtype=np.float64).reshape(-1)
    if np.any(gamma == 0):
        raise DegenerateScaleError("BatchNorm gamma must be nonzero to fold into a threshold")
    if np.any(var < 0):
        raise ValueError("BatchNorm variance must be non-negative")
    threshold = mean - beta * np.sqrt(var + eps) / gamma
    return FoldedBatchNorm(threshold, np.sign(gamma).astype(np.int8))


def im2col(x: np.ndarray, kernel: int, stride: int, padding: str, pad_value: float = 0.0) -> np.ndarray:
    """Patches of an H x W x C map as rows ordered (kh, kw, c).

    Returns ``(Ho, Wo, kernel * kernel * C)``.
    """
    h, w, c = x.shape
    if padding == "same":
        top, bottom = same_padding(h, kernel, stride)
        left, right = same_padding(w, kernel, stride)
        if top or bottom or left or right:
            x = np.pad(x, ((top, bottom), (left, right), (0, 0)), constant_values=pad_value)
    if x.shape[0] < kernel or x.shape[1] < kernel:
        raise DimensionError(f"input {h}x{w} smaller than kernel {kernel}")
    win = sliding_window_view(x, (kernel, kernel), axis=(0, 1))[::stride, ::stride]
    # (Ho, Wo, C, kh, kw) -> (Ho, Wo, kh, kw, C)
    win = win.transpose(0, 1, 3, 4, 2)
    ho, wo = win.shape[:2]
    return win.reshape(ho, wo, kernel * kernel * c)


def real_conv2d(
    x: np.ndarray, weights: np.ndarray, stride: int, padding: str, pad_value: float = 0.0
) -> np.ndarray:
    """Dense float64 convolution; ``weights`` is (C_out, k, k, C_in)."""
    c_out, k, _, c_in = weights.shape
    if x.ndim != 3 or x.shape[2] != c_in:
        raise DimensionError(f"input channels {x.shape} do not match weights {weights.shape}")
    cols = im2col(np.asarray(x, dtype=np.float64), k, stride, padding, pad_value)
    ho, wo, n = cols.shape
    out = cols.reshape(-1, n) @ weights.reshape(c_out, n).astype(np.float64).T
    return out.reshape(ho, wo, c_out)


def first_conv_forward(image: np.ndarray, weights: BitTensor, stride: int, padding: str) -> np.ndarray:
    """Real image convolved with ±1 weights. No BatchNorm, activation or bias."""
    return real_conv2d(image, unpack(weights).astype(np.float64), stride, padding)


class PackedWeights:
    """Row-packed view of quantized weights, one row per output unit.

    ``planes`` holds the bit planes of the unsigned level codes, least
    significant first. A k-bit code ``c`` stands for the value
    ``2 * c / (2**k - 1) - 1``; with one plane this is the plain ±1 encoding.
    """

    def __init__(self, planes: list[BitTensor]):
        if not planes:
            raise ValueError("need at least one bit plane")
        shape = planes[0].logical_shape
        if any(p.logical_shape != shape for p in planes):
            raise DimensionError("bit planes differ in shape")
        self.planes = planes
        self.shape = shape
        self.units = shape[0]
        self.fan_in = planes[0].valid_bits // self.units
        self.rows = [self._rows(p) for p in planes]

    def _rows(self, plane: BitTensor) -> np.ndarray:
        if self.fan_in % WORD_BITS == 0:
            # rows already start on word boundaries
            return plane.words.reshape(self.units, -1)
        return pack_rows(plane.bits().reshape(self.units, self.fan_in))

    @property
    def levels(self) -> int:
        return (1 << len(self.planes)) - 1

    def dot(self, a_rows: np.ndarray) -> np.ndarray:
        """Dot products between packed ±1 activation rows and every weight row.

        Integer-exact for one plane; for k planes the integer sum
        ``sum_b 2**b * xnor_dot(a, plane_b)`` is divided by ``2**k - 1``.
        """
        if len(self.rows) == 1:
            return xnor_matmul(a_rows, self.rows[0], self.fan_in)
        acc = np.zeros((a_rows.shape[0], self.units), dtype=np.int64)
        for b, rows in enumerate(self.rows):
            acc += xnor_matmul(a_rows, rows, self.fan_in) << b
        return acc / self.levels

    def values(self) -> np.ndarray:
        codes = np.zeros(self.planes[0].valid_bits, dtype=np.int64)
        for b, plane in enumerate(self.planes):
            codes |= plane.bits().astype(np.int64) << b
        return (2.0 * codes / self.levels - 1.0).reshape(self.shape)


def binary_conv2d(signs: np.ndarray, weights: PackedWeights, stride: int, padding: str) -> np.ndarray:
    """XNOR-popcount convolution of a boolean (+1 = True) H x W x C map."""
    c_out, k, _, c_in = weights.shape
    if signs.ndim != 3 or signs.shape[2] != c_in:
        raise DimensionError(f"input {signs.shape} does not match weights {weights.shape}")
    # padding with False is padding with -1
    cols = im2col(signs.astype(np.uint8), k, stride, padding, pad_value=0)
    ho, wo, n = cols.shape
    out = weights.dot(pack_rows(cols.reshape(-1, n)))
    return out.reshape(ho, wo, c_out)


def binary_dense(signs: np.ndarray, weights: PackedWeights) -> np.ndarray:
    flat = signs.reshape(1, -1)
    if flat.shape[1] != weights.fan_in:
        raise DimensionError(f"FC input size {flat.shape[1]} != {weights.fan_in}")
    return weights.dot(pack_rows(flat.astype(np.uint8)))[0]


def max_pool(x: np.ndarray, k: int, s: int) -> np.ndarray:
    """Channelwise max over k x k windows with stride s (no padding)."""
    if x.ndim != 3:
        raise DimensionError(f"pooling expects an H x W x C map, got {x.shape}")
    h, w, _ = x.shape
    if h < k or w < k:
        raise DimensionError(f"input {h}x{w} smaller than pool kernel {k}")
    win = sliding_window_view(x, (k, k), axis=(0, 1))[::s, ::s]
    return win.max(axis=(3, 4))
