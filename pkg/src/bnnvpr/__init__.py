"""Binary neural networks for visual place recognition."""

from .arch import LayerKind, LayerSpec, NetworkSpec, preset
from .bitcore import BitTensor, pack, unpack, xnor_dot
from .network import FrozenNetwork, forward

__all__ = [
    "BitTensor",
    "FrozenNetwork",
    "LayerKind",
    "LayerSpec",
    "NetworkSpec",
    "forward",
    "pack",
    "preset",
    "unpack",
    "xnor_dot",
]
