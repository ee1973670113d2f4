"""Declarative network descriptions and the named architecture presets.

Layers use the usual AlexNet-style shorthand: ``C(k,s,h)`` is a convolution
block with kernel ``k``, stride ``s`` and ``h`` filters, ``P(k,s)`` a max
pool and ``FC(n)`` a fully connected layer with ``n`` neurons.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace
from enum import Enum
from typing import Iterable, Sequence

WEIGHT_BITS = (1, 2, 4, 8, 32)
ACTIVATION_BITS = (1, 32)


class SpecError(ValueError):
    pass


class LayerKind(str, Enum):
    CONV = "ConvBlock"
    POOL = "Pool"
    FC = "FullyConnected"


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: LayerKind
    kernel: int = 1
    stride: int = 1
    channels: int = 0
    weight_bits: int = 32
    activation_bits: int = 32
    batchnorm: bool = False
    padding: str = "valid"

    def __post_init__(self) -> None:
        if self.kind is not LayerKind.POOL:
            if self.weight_bits not in WEIGHT_BITS:
                raise SpecError(f"{self.name}: unsupported weight precision {self.weight_bits}")
            if self.activation_bits not in ACTIVATION_BITS:
                raise SpecError(
                    f"{self.name}: unsupported activation precision {self.activation_bits}"
                )
            if self.channels <= 0:
                raise SpecError(f"{self.name}: channel count must be positive")
        if self.padding not in ("valid", "same"):
            raise SpecError(f"{self.name}: padding must be 'valid' or 'same'")
        if self.kernel <= 0 or self.stride <= 0:
            raise SpecError(f"{self.name}: kernel and stride must be positive")

    @property
    def has_weights(self) -> bool:
        return self.kind is not LayerKind.POOL

    @property
    def binary_input(self) -> bool:
        return self.activation_bits == 1

    def notation(self) -> str:
        if self.kind is LayerKind.CONV:
            return f"C({self.kernel},{self.stride},{self.channels})"
        if self.kind is LayerKind.POOL:
            return f"P({self.kernel},{self.stride})"
        return f"FC({self.channels})"


def conv_output_hw(h: int, w: int, kernel: int, stride: int, padding: str) -> tuple[int, int]:
    if padding == "same":
        return -(-h // stride), -(-w // stride)
    if h < kernel or w < kernel:
        raise SpecError(f"input {h}x{w} smaller than kernel {kernel}")
    return (h - kernel) // stride + 1, (w - kernel) // stride + 1


def same_padding(size: int, kernel: int, stride: int) -> tuple[int, int]:
    """(before, after) padding that keeps ``ceil(size / stride)`` outputs."""
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    input_shape: tuple[int, int, int]
    layers: tuple[LayerSpec, ...]
    output_layer: str
    head_neurons: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise SpecError(f"{self.name}: duplicate layer names")
        if self.output_layer not in names:
            raise SpecError(f"{self.name}: unknown output layer {self.output_layer!r}")
        weighted = [layer for layer in self.layers if layer.has_weights]
        if weighted and weighted[0].kind is LayerKind.CONV:
            first = weighted[0]
            if first.activation_bits != 32 or first.batchnorm:
                raise SpecError(
                    f"{self.name}: first convolution must read the raw image "
                    "(32-bit input, no BatchNorm)"
                )
        # resolves the whole chain, raising on any inconsistency
        self.shapes()

    def layer(self, name: str) -> LayerSpec:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise SpecError(f"{self.name}: unknown layer {name!r}")

    def index(self, name: str) -> int:
        return [layer.name for layer in self.layers].index(self.layer(name).name)

    def shapes(self, input_shape: Sequence[int] | None = None) -> list[tuple[int, ...]]:
        """Output shape of every layer: ``(H, W, C)`` for maps, ``(n,)`` for FC."""
        shape: tuple[int, ...] = tuple(input_shape or self.input_shape)
        out = []
        for layer in self.layers:
            shape = layer_output_shape(layer, shape)
            out.append(shape)
        return out

    def input_shape_of(self, name: str) -> tuple[int, ...]:
        idx = self.index(name)
        return self.input_shape if idx == 0 else self.shapes()[idx - 1]

    def feature_size(self, name: str | None = None) -> int:
        shape = self.shapes()[self.index(name or self.output_layer)]
        size = 1
        for d in shape:
            size *= d
        return size

    def truncated(self, output_layer: str | None = None) -> NetworkSpec:
        """Spec cut after ``output_layer`` (default: the current output layer)."""
        stop = self.index(output_layer or self.output_layer)
        return replace(
            self, layers=self.layers[: stop + 1], output_layer=self.layers[stop].name
        )

    def feature_extractor(self) -> NetworkSpec:
        """Spec without any FC layers, ending at the last remaining layer."""
        kept = []
        for layer in self.layers:
            if layer.kind is LayerKind.FC:
                break
            kept.append(layer)
        return replace(self, layers=tuple(kept), output_layer=kept[-1].name)

    def notation(self) -> str:
        return " ".join(layer.notation() for layer in self.layers)


def layer_output_shape(layer: LayerSpec, shape: tuple[int, ...]) -> tuple[int, ...]:
    if layer.kind is LayerKind.FC:
        return (layer.channels,)
    if len(shape) != 3:
        raise SpecError(f"{layer.name}: expected an H x W x C input, got {shape}")
    h, w, c = shape
    if layer.kind is LayerKind.POOL:
        if h < layer.kernel or w < layer.kernel:
            raise SpecError(f"{layer.name}: input {h}x{w} smaller than pool kernel")
        return ((h - layer.kernel) // layer.stride + 1, (w - layer.kernel) // layer.stride + 1, c)
    oh, ow = conv_output_hw(h, w, layer.kernel, layer.stride, layer.padding)
    return (oh, ow, layer.channels)


_TOKEN = re.compile(r"(C|P|FC)\(([\d,\s]+)\)")


def parse_layers(
    text: str,
    weight_bits: int = 1,
    first_padding: str = "valid",
    padding: str = "same",
) -> tuple[LayerSpec, ...]:
    """Build layers from shorthand such as ``"C(3,1,32) P(2,2) FC(256)"``.

    Naming follows the AlexNet convention (conv1, pool1, conv2, ...); the first
    convolution reads the raw image, so it has 32-bit inputs and no BatchNorm.
    """
    tokens = _TOKEN.findall(text)
    if not tokens or "".join(f"{k}({a})" for k, a in tokens).replace(" ", "") != re.sub(
        r"\s+", "", text
    ):
        raise SpecError(f"cannot parse layer notation {text!r}")
    layers: list[LayerSpec] = []
    n_conv = n_fc = 0
    for kind, args in tokens:
        nums = [int(v) for v in args.split(",")]
        if kind == "C":
            k, s, h = nums
            first = n_conv == 0 and n_fc == 0
            n_conv += 1
            layers.append(
                LayerSpec(
                    name=f"conv{n_conv}",
                    kind=LayerKind.CONV,
                    kernel=k,
                    stride=s,
                    channels=h,
                    weight_bits=weight_bits,
                    activation_bits=32 if first or weight_bits == 32 else 1,
                    batchnorm=not first,
                    padding=first_padding if first else padding,
                )
            )
        elif kind == "P":
            k, s = nums
            layers.append(LayerSpec(name=f"pool{max(n_conv, 1)}", kind=LayerKind.POOL, kernel=k, stride=s))
        else:
            (n,) = nums
            n_fc += 1
            layers.append(
                LayerSpec(
                    name=f"fc{n_fc}",
                    kind=LayerKind.FC,
                    channels=n,
                    weight_bits=weight_bits,
                    activation_bits=1 if weight_bits != 32 else 32,
                    batchnorm=True,
                )
            )
    return tuple(layers)


def _rename(layers: Iterable[LayerSpec], names: Sequence[str]) -> tuple[LayerSpec, ...]:
    return tuple(replace(layer, name=name) for layer, name in zip(layers, names, strict=True))


ALEXNET_INPUT = (227, 227, 3)
_BASELINE = "C(11,4,96) P(2,2) C(5,1,256) P(2,2) C(3,1,384) C(3,1,384) C(3,1,256) P(2,2) FC(4096) FC(4096)"
_BASELINE_NAMES = ("conv1", "pool1", "conv2", "pool2", "conv3", "conv4", "conv5", "pool5", "fc6", "fc7")
_FLOPPY = "C(11,4,96) P(2,2) C(5,1,256) P(2,2) C(3,1,256) P(2,2)"
_FLOPPY_NAMES = ("conv1", "pool1", "conv2", "pool2", "conv5", "pool5")
_DESK = "C(3,1,32) P(2,2) C(3,1,64) P(2,2) C(3,1,64) P(2,2)"

PRESETS = ("baseline", "binarynet", "floppynet", "shallownet", "floppynet_k", "desk")


def preset(name: str, k: int | None = None) -> NetworkSpec:
    """Named architecture.

    ``floppynet_k`` takes the weight precision ``k`` in {2, 4, 8}; the name
    ``floppynet_2`` (etc.) is accepted as a shorthand. ``desk`` is a small
    FloppyNet-shaped network for 32x32 RGB inputs, used for quick training runs.
    """
    m = re.fullmatch(r"floppynet_(\d+)", name)
    if m:
        name, k = "floppynet_k", int(m.group(1))
    if name in ("baseline", "binarynet"):
        bits = 32 if name == "baseline" else 1
        layers = _rename(parse_layers(_BASELINE, weight_bits=bits), _BASELINE_NAMES)
        return NetworkSpec(name, ALEXNET_INPUT, layers, "pool5", head_neurons=4096)
    if name in ("floppynet", "shallownet", "floppynet_k"):
        bits = 1
        if name == "floppynet_k":
            if k not in (2, 4, 8):
                raise SpecError(f"floppynet_k needs k in (2, 4, 8), got {k}")
            bits = k
        layers = _rename(parse_layers(_FLOPPY), _FLOPPY_NAMES)
        layers = tuple(replace(layer, weight_bits=bits) if layer.has_weights else layer for layer in layers)
        label = f"floppynet_{bits}" if name == "floppynet_k" else name
        head = 4096 if name == "shallownet" else 256
        return NetworkSpec(label, ALEXNET_INPUT, layers, "pool5", head_neurons=head)
    if name == "desk":
        return desk_spec()
    raise SpecError(f"unknown preset {name!r}")


def desk_spec(
    input_shape: tuple[int, int, int] = (32, 32, 3),
    layers: str = _DESK,
    weight_bits: int = 1,
    head_neurons: int = 256,
) -> NetworkSpec:
    parsed = parse_layers(layers, weight_bits=weight_bits, first_padding="same")
    return NetworkSpec("desk", input_shape, parsed, parsed[-1].name, head_neurons=head_neurons)


def parse_shape(text: str) -> tuple[int, int, int]:
    """``"227x227x3"`` -> ``(227, 227, 3)``."""
    parts = text.lower().split("x")
    if len(parts) != 3 or not all(p.isdigit() for p in parts):
        raise SpecError(f"shape must look like HxWxC, got {text!r}")
    h, w, c = (int(p) for p in parts)
    return h, w, c


def spec_with_input(spec: NetworkSpec, input_shape: Sequence[int]) -> NetworkSpec:
    return replace(spec, input_shape=tuple(input_shape))


__all__ = [
    "LayerKind",
    "LayerSpec",
    "NetworkSpec",
    "SpecError",
    "desk_spec",
    "parse_layers",
    "parse_shape",
    "preset",
    "spec_with_input",
    "PRESETS",
]
