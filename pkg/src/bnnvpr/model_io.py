"""Binary model files, training checkpoints and descriptor files.

Model file layout (all little-endian)::

    header   magic "BNVP" | version u16 | reserved u16 | payload length u32
    payload  spec block, then for every layer in order:
               BatchNorm block  eps f64 | gamma, beta, mean, var (f32 x C each)
               weight block     ndim u8 | dims u32... | data
                                data = k bit planes of u64 words (LSB-first bits)
                                       or f32 values for 32-bit layers
    trailer  CRC-32 of the payload u32
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import asdict, dataclass
from math import prod
from pathlib import Path
from typing import Iterable

import numpy as np

from .arch import LayerKind, LayerSpec, NetworkSpec
from .bitcore import WORD_DTYPE, BitTensor, n_words
from .layers import BatchNormParams
from .network import FrozenLayer, FrozenNetwork
from .vpr import Descriptor

MAGIC = b"BNVP"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHHI")
_KINDS = [LayerKind.CONV, LayerKind.POOL, LayerKind.FC]
_PADDINGS = ["valid", "same"]
_LAYER = struct.Struct("<BHHIBBBB")


class ModelFileError(ValueError):
    """Malformed or truncated model file."""


class UnsupportedVersionError(ModelFileError):
    pass


class ChecksumError(ModelFileError):
    pass


# --------------------------------------------------------------------------
# spec encoding


def _put_str(buf: io.BytesIO, s: str) -> None:
    raw = s.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ModelFileError("model file is truncated")
        out = bytes(self.data[self.pos : self.pos + n])
        self.pos += n
        return out

    def unpack(self, fmt: str | struct.Struct):
        s = fmt if isinstance(fmt, struct.Struct) else struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def string(self) -> str:
        (n,) = self.unpack("<H")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ModelFileError("invalid string in model file") from exc

    def array(self, dtype, count: int) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).copy()


def encode_spec(spec: NetworkSpec) -> bytes:
    buf = io.BytesIO()
    _put_str(buf, spec.name)
    buf.write(struct.pack("<III", *spec.input_shape))
    _put_str(buf, spec.output_layer)
    buf.write(struct.pack("<I", spec.head_neurons or 0))
    buf.write(struct.pack("<H", len(spec.layers)))
    for layer in spec.layers:
        _put_str(buf, layer.name)
        buf.write(
            _LAYER.pack(
                _KINDS.index(layer.kind),
                layer.kernel,
                layer.stride,
                layer.channels,
                layer.weight_bits,
                layer.activation_bits,
                int(layer.batchnorm),
                _PADDINGS.index(layer.padding),
            )
        )
    return buf.getvalue()


def _decode_spec(r: _Reader) -> NetworkSpec:
    name = r.string()
    input_shape = r.unpack("<III")
    output_layer = r.string()
    (head,) = r.unpack("<I")
    (n_layers,) = r.unpack("<H")
    layers = []
    for _ in range(n_layers):
        lname = r.string()
        kind, kernel, stride, channels, wbits, abits, bn, pad = r.unpack(_LAYER)
        if kind >= len(_KINDS) or pad >= len(_PADDINGS):
            raise ModelFileError(f"bad layer record for {lname!r}")
        layers.append(
            LayerSpec(lname, _KINDS[kind], kernel, stride, channels, wbits, abits, bool(bn), _PADDINGS[pad])
        )
    return NetworkSpec(name, input_shape, tuple(layers), output_layer, head or None)


# --------------------------------------------------------------------------
# frozen model files


def encode_payload(net: FrozenNetwork) -> bytes:
    buf = io.BytesIO()
    buf.write(encode_spec(net.spec))
    for fl in net.layers:
        if fl.bn is not None:
            buf.write(struct.pack("<d", fl.bn.eps))
            for arr in (fl.bn.gamma, fl.bn.beta, fl.bn.mean, fl.bn.var):
                buf.write(arr.astype("<f4").tobytes())
        if fl.spec.has_weights:
            shape = fl.weight_shape
            buf.write(struct.pack("<B", len(shape)))
            buf.write(struct.pack(f"<{len(shape)}I", *shape))
            if isinstance(fl.weights, np.ndarray):
                buf.write(fl.weights.astype("<f4").tobytes())
            else:
                for plane in fl.weights:
                    buf.write(plane.to_bytes())
    return buf.getvalue()


def dumps(net: FrozenNetwork) -> bytes:
    payload = encode_payload(net)
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, 0, len(payload))
    return header + payload + struct.pack("<I", zlib.crc32(payload))


def loads(data: bytes) -> FrozenNetwork:
    if len(data) < _HEADER.size + 4:
        raise ModelFileError("file too short to be a model")
    magic, version, _, length = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ModelFileError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported model format version {version}")
    if len(data) != _HEADER.size + length + 4:
        raise ModelFileError("payload length does not match file size")
    payload = data[_HEADER.size : _HEADER.size + length]
    (stored,) = struct.unpack_from("<I", data, _HEADER.size + length)
    if zlib.crc32(payload) != stored:
        raise ChecksumError("model payload checksum mismatch")
    try:
        return decode_payload(payload)
    except ModelFileError:
        raise
    except (ValueError, struct.error) as exc:
        raise ModelFileError(f"inconsistent model payload: {exc}") from exc


def decode_payload(payload: bytes) -> FrozenNetwork:
    r = _Reader(payload)
    spec = _decode_spec(r)
    layers = []
    for layer in spec.layers:
        bn = weights = None
        if layer.batchnorm:
            (eps,) = r.unpack("<d")
            c = spec.input_shape_of(layer.name)[-1]
            gamma, beta, mean, var = (r.array("<f4", c) for _ in range(4))
            bn = BatchNormParams(gamma, beta, mean, var, eps=eps)
        if layer.has_weights:
            (ndim,) = r.unpack("<B")
            shape = r.unpack(f"<{ndim}I")
            count = prod(shape)
            if layer.weight_bits == 32:
                weights = r.array("<f4", count).reshape(shape)
            else:
                nbytes = n_words(count) * WORD_DTYPE.itemsize
                weights = tuple(BitTensor.from_bytes(r.take(nbytes), shape) for _ in range(layer.weight_bits))
        layers.append(FrozenLayer(layer, weights, bn))
    if r.pos != len(payload):
        raise ModelFileError("trailing bytes after last layer")
    return FrozenNetwork(spec, tuple(layers))


def save(net: FrozenNetwork, path: str | Path) -> int:
    data = dumps(net)
    Path(path).write_bytes(data)
    return len(data)


def load(path: str | Path) -> FrozenNetwork:
    return loads(Path(path).read_bytes())


@dataclass(frozen=True)
class FileAccounting:
    """Byte budget of a model file, split into what the size model counts and the rest."""

    weight_bytes: int
    bn_affine_bytes: int
    bn_stats_bytes: int
    framing_bytes: int

    @property
    def counted_bytes(self) -> int:
        """Weights plus BatchNorm scale and shift: what the size tables account for."""
        return self.weight_bytes + self.bn_affine_bytes

    @property
    def total(self) -> int:
        return self.counted_bytes + self.bn_stats_bytes + self.framing_bytes


def accounting(net: FrozenNetwork) -> FileAccounting:
    weights = affine = stats = 0
    for fl in net.layers:
        if fl.bn is not None:
            affine += 2 * 4 * fl.bn.channels
            stats += 2 * 4 * fl.bn.channels
        if fl.spec.has_weights:
            if isinstance(fl.weights, np.ndarray):
                weights += 4 * fl.weights.size
            else:
                weights += sum(p.nbytes for p in fl.weights)
    total = len(dumps(net))
    return FileAccounting(weights, affine, stats, total - weights - affine - stats)


# --------------------------------------------------------------------------
# spec / checkpoint / descriptor files


def spec_to_dict(spec: NetworkSpec) -> dict:
    return {
        "name": spec.name,
        "input_shape": list(spec.input_shape),
        "output_layer": spec.output_layer,
        "head_neurons": spec.head_neurons,
        "layers": [dict(asdict(layer), kind=layer.kind.value) for layer in spec.layers],
    }


def spec_from_dict(d: dict) -> NetworkSpec:
    layers = tuple(LayerSpec(**dict(layer, kind=LayerKind(layer["kind"]))) for layer in d["layers"])
    return NetworkSpec(d["name"], tuple(d["input_shape"]), layers, d["output_layer"], d.get("head_neurons"))


def save_checkpoint(model, path: str | Path) -> None:
    """Write a :class:`~bnnvpr.train.TrainedModel` as an ``.npz`` archive."""
    meta = {
        "spec": spec_to_dict(model.spec),
        "config": asdict(model.config),
        "history": model.history,
    }
    arrays = {f"state/{k}": v for k, v in model.state.items()}
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path: str | Path):
    from .train import TrainConfig, TrainedModel

    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(z["meta"].tobytes().decode())
        state = {k[len("state/") :]: z[k] for k in z.files if k.startswith("state/")}
    return TrainedModel(spec_from_dict(meta["spec"]), TrainConfig(**meta["config"]), state, meta["history"])


def write_descriptors(path: str | Path, descriptors: Iterable[Descriptor], ids_path: str | Path | None = None) -> None:
    """Descriptor file: for each image ``dim`` as u32 then ``dim`` f32 values.

    Image ids go to a sidecar text file (``<path>.ids`` by default), one per line.
    """
    descriptors = list(descriptors)
    with open(path, "wb") as fh:
        for d in descriptors:
            fh.write(struct.pack("<I", d.dim))
            fh.write(d.values.astype("<f4").tobytes())
    ids_path = Path(ids_path) if ids_path else Path(str(path) + ".ids")
    ids_path.write_text("".join(f"{d.image_id}\n" for d in descriptors))


def read_descriptors(path: str | Path, ids_path: str | Path | None = None, source_layer: str = "") -> list[Descriptor]:
    data = Path(path).read_bytes()
    ids_path = Path(ids_path) if ids_path else Path(str(path) + ".ids")
    ids = ids_path.read_text().splitlines() if ids_path.exists() else []
    out = []
    r = _Reader(data)
    while r.pos < len(data):
        (dim,) = r.unpack("<I")
        values = r.array("<f4", dim).astype(np.float64)
        image_id = ids[len(out)] if len(out) < len(ids) else str(len(out))
        out.append(Descriptor(values, source_layer, image_id))
    return out
