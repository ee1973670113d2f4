"""Frozen (inference-only) networks and their forward pass."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from .arch import LayerKind, LayerSpec, NetworkSpec, SpecError
from .bitcore import BitTensor, DimensionError, pack_bits
from .layers import (
    BatchNormParams,
    PackedWeights,
    binary_conv2d,
    binary_dense,
    max_pool,
    real_conv2d,
)


@dataclass(frozen=True, eq=False)
class FrozenLayer:
    spec: LayerSpec
    weights: tuple[BitTensor, ...] | np.ndarray | None = None
    bn: BatchNormParams | None = None

    def __post_init__(self) -> None:
        if isinstance(self.weights, list):
            object.__setattr__(self, "weights", tuple(self.weights))
        elif isinstance(self.weights, np.ndarray):
            w = np.array(self.weights, dtype=np.float32)
            w.setflags(write=False)
            object.__setattr__(self, "weights", w)
        if self.spec.has_weights:
            if self.weights is None:
                raise SpecError(f"{self.spec.name}: missing weights")
            bits = self.spec.weight_bits
            if bits == 32 and not isinstance(self.weights, np.ndarray):
                raise SpecError(f"{self.spec.name}: 32-bit layer needs float weights")
            if bits != 32 and (not isinstance(self.weights, tuple) or len(self.weights) != bits):
                raise SpecError(f"{self.spec.name}: {bits}-bit layer needs {bits} bit planes")
        if self.spec.batchnorm != (self.bn is not None):
            raise SpecError(f"{self.spec.name}: BatchNorm presence disagrees with spec")

    @property
    def weight_shape(self) -> tuple[int, ...]:
        if isinstance(self.weights, np.ndarray):
            return self.weights.shape
        return self.weights[0].logical_shape

    @cached_property
    def packed(self) -> PackedWeights:
        return PackedWeights(list(self.weights))

    @cached_property
    def real_weights(self) -> np.ndarray:
        if isinstance(self.weights, np.ndarray):
            return self.weights.astype(np.float64)
        return self.packed.values()

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FrozenLayer):
            return NotImplemented
        if self.spec != other.spec or self.bn != other.bn:
            return False
        if isinstance(self.weights, np.ndarray) or isinstance(other.weights, np.ndarray):
            return (
                isinstance(self.weights, np.ndarray)
                and isinstance(other.weights, np.ndarray)
                and np.array_equal(self.weights, other.weights)
            )
        return self.weights == other.weights

    def __call__(self, x: np.ndarray) -> np.ndarray:
        layer = self.spec
        if layer.kind is LayerKind.POOL:
            return max_pool(x, layer.kernel, layer.stride)
        if layer.activation_bits == 1:
            signs = self.bn.folded().binarize(x) if self.bn is not None else x >= 0
            if layer.weight_bits == 32:
                return self._dense_or_conv(np.where(signs, 1.0, -1.0), pad=-1.0)
            if layer.kind is LayerKind.FC:
                return binary_dense(signs, self.packed)
            return binary_conv2d(signs, self.packed, layer.stride, layer.padding)
        if self.bn is not None:
            x = np.maximum(self.bn.apply(x), 0.0)
        return self._dense_or_conv(x, pad=0.0)

    def _dense_or_conv(self, x: np.ndarray, pad: float) -> np.ndarray:
        w = self.real_weights
        if self.spec.kind is LayerKind.FC:
            flat = x.reshape(-1)
            if flat.size != w.shape[1]:
                raise DimensionError(f"{self.spec.name}: FC input {flat.size} != {w.shape[1]}")
            return w @ flat
        return real_conv2d(x, w, self.spec.stride, self.spec.padding, pad_value=pad)


@dataclass(frozen=True, eq=False)
class FrozenNetwork:
    spec: NetworkSpec
    layers: tuple[FrozenLayer, ...]
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(self.layers))
        if tuple(fl.spec for fl in self.layers) != self.spec.layers:
            raise SpecError("frozen layers do not match the network spec")
        shape: tuple[int, ...] = self.spec.input_shape
        for fl in self.layers:
            if fl.spec.has_weights:
                expected = expected_weight_shape(fl.spec, shape)
                if fl.weight_shape != expected:
                    raise DimensionError(
                        f"{fl.spec.name}: weights {fl.weight_shape}, expected {expected}"
                    )
            if fl.bn is not None and fl.bn.channels != shape[-1]:
                raise DimensionError(f"{fl.spec.name}: BatchNorm over {fl.bn.channels} channels, input has {shape[-1]}")
            shape = self.spec.shapes()[self.spec.index(fl.spec.name)]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FrozenNetwork):
            return NotImplemented
        return self.spec == other.spec and self.layers == other.layers

    @property
    def has_fc(self) -> bool:
        return any(fl.spec.kind is LayerKind.FC for fl in self.layers)

    def layer(self, name: str) -> FrozenLayer:
        return self.layers[self.spec.index(name)]


def expected_weight_shape(layer: LayerSpec, in_shape: Sequence[int]) -> tuple[int, ...]:
    if layer.kind is LayerKind.CONV:
        return (layer.channels, layer.kernel, layer.kernel, in_shape[-1])
    fan_in = 1
    for d in in_shape:
        fan_in *= d
    return (layer.channels, fan_in)


def forward_all(net: FrozenNetwork, image: np.ndarray, output_layer: str | None = None) -> dict[str, np.ndarray]:
    """Run the chain up to ``output_layer`` and keep every intermediate map."""
    stop = net.spec.index(output_layer or net.spec.output_layer)
    image = np.asarray(image)
    if image.shape != net.spec.input_shape:
        raise DimensionError(f"image shape {image.shape} != network input {net.spec.input_shape}")
    x = image.astype(np.float64)
    maps = {}
    for fl in net.layers[: stop + 1]:
        x = fl(x)
        maps[fl.spec.name] = x
    return maps


def forward(net: FrozenNetwork, image: np.ndarray, output_layer: str | None = None) -> np.ndarray:
    """Flattened output of ``output_layer`` (default: ``net.spec.output_layer``)."""
    name = output_layer or net.spec.output_layer
    return forward_all(net, image, name)[name].reshape(-1)


def random_frozen(spec: NetworkSpec, seed: int = 0) -> FrozenNetwork:
    """Network with random weights and BatchNorm statistics, for testing and sizing."""
    rng = np.random.default_rng(seed)
    layers = []
    shape: tuple[int, ...] = spec.input_shape
    for i, layer in enumerate(spec.layers):
        weights = None
        bn = None
        if layer.has_weights:
            wshape = expected_weight_shape(layer, shape)
            if layer.weight_bits == 32:
                fan_in = int(np.prod(wshape[1:]))
                weights = rng.normal(0.0, 1.0 / np.sqrt(fan_in), wshape).astype(np.float32)
            else:
                weights = tuple(
                    pack_bits(rng.integers(0, 2, wshape, dtype=np.uint8)) for _ in range(layer.weight_bits)
                )
            if layer.batchnorm:
                c = shape[-1]
                gamma = rng.uniform(0.5, 1.5, c) * rng.choice([-1.0, 1.0], c)
                bn = BatchNormParams(
                    gamma=gamma,
                    beta=rng.normal(0.0, 0.5, c),
                    mean=rng.normal(0.0, 2.0, c),
                    var=rng.uniform(0.5, 4.0, c),
                )
        layers.append(FrozenLayer(layer, weights, bn))
        shape = spec.shapes()[i]
    return FrozenNetwork(spec, tuple(layers))
