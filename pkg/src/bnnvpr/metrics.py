"""Recognition scores, memory efficiency, parameter/size accounting and MAC counts."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

from .arch import LayerKind, NetworkSpec, spec_with_input

KIB = 1024
MIB = 1024 * 1024
BN_PARAMS_PER_CHANNEL = 2
# xnor (1 cycle) + popcount (4) + accumulate (1) handle 32 binary MACs
BINARY_MACS_PER_CYCLE = 32 / 6


def s_p100(report) -> float:
    """Percentage of queries whose best match is correct.

    Accepts a :class:`~bnnvpr.vpr.MatchReport` or a sequence of them; several
    reports are pooled by summing correct counts over summed totals.
    """
    reports = list(report) if isinstance(report, (list, tuple)) else [report]
    total = sum(r.total for r in reports)
    if total == 0:
        raise ValueError("cannot score an empty report")
    return 100.0 * sum(r.n_correct for r in reports) / total


def memory_efficiency(s_p100_score: float, size_kib: float) -> float:
    """KiB of model per S_P100 point; lower is better."""
    if s_p100_score <= 0:
        raise ValueError("S_P100 must be positive to compute memory cost per point")
    return size_kib / s_p100_score


@dataclass(frozen=True)
class LayerSize:
    layer: str
    setup: str
    feature_size: int
    binarizable: int
    non_binarizable: int
    cum_binarizable: int
    cum_non_binarizable: int
    size_bytes: int
    full_precision_bytes: int

    @property
    def size_kib(self) -> float:
        return self.size_bytes / KIB

    @property
    def size_mib(self) -> float:
        return self.size_bytes / MIB

    @property
    def ratio_percent(self) -> float:
        """Size relative to the same layers stored at 32 bits."""
        return 100.0 * self.size_bytes / self.full_precision_bytes if self.full_precision_bytes else 100.0


@dataclass(frozen=True)
class SizeBreakdown:
    network: str
    bits: int | None
    rows: tuple[LayerSize, ...]

    @property
    def total_bytes(self) -> int:
        return self.rows[-1].size_bytes

    @property
    def total_kib(self) -> float:
        return self.total_bytes / KIB

    def at(self, layer: str) -> LayerSize:
        for row in self.rows:
            if row.layer == layer:
                return row
        raise KeyError(layer)

    def table(self) -> list[dict]:
        out = []
        for r in self.rows:
            d = asdict(r)
            d.update(
                size_kib=round(r.size_kib, 4),
                size_mib=round(r.size_mib, 4),
                ratio_percent=round(r.ratio_percent, 4),
            )
            out.append(d)
        return out

    def to_csv(self) -> str:
        return _csv(self.table())

    def to_json(self) -> str:
        return json.dumps({"network": self.network, "bits": self.bits, "layers": self.table()}, indent=2)


def _csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def _bytes(bits: int) -> int:
    return -(-bits // 8)


def size_breakdown(spec: NetworkSpec, k: int | None = None) -> SizeBreakdown:
    """Cumulative model size at every depth.

    Weights are binarizable and cost ``k`` bits each (each layer's own precision
    when ``k`` is None). BatchNorm contributes two 32-bit parameters per
    normalized channel. No layer carries a bias.
    """
    rows = []
    cum_bits = cum_bin = cum_non = 0
    in_shape: tuple[int, ...] = spec.input_shape
    for layer, out_shape in zip(spec.layers, spec.shapes()):
        binarizable = non_bin = 0
        if layer.has_weights:
            if layer.kind is LayerKind.CONV:
                binarizable = layer.kernel * layer.kernel * in_shape[-1] * layer.channels
            else:
                fan_in = 1
                for d in in_shape:
                    fan_in *= d
                binarizable = fan_in * layer.channels
            if layer.batchnorm:
                non_bin = BN_PARAMS_PER_CHANNEL * in_shape[-1]
        bits = k if k is not None else (layer.weight_bits if layer.has_weights else 0)
        cum_bits += binarizable * bits
        cum_bin += binarizable
        cum_non += non_bin
        feature = 1
        for d in out_shape:
            feature *= d
        rows.append(
            LayerSize(
                layer=layer.name,
                setup=layer.notation(),
                feature_size=feature,
                binarizable=binarizable,
                non_binarizable=non_bin,
                cum_binarizable=cum_bin,
                cum_non_binarizable=cum_non,
                size_bytes=_bytes(cum_bits) + 4 * cum_non,
                full_precision_bytes=4 * (cum_bin + cum_non),
            )
        )
        in_shape = out_shape
    return SizeBreakdown(spec.name, k, tuple(rows))


@dataclass(frozen=True)
class LayerMacs:
    layer: str
    macs: int
    binary: bool
    bn_macs: int

    @property
    def full_precision_macs(self) -> int:
        return self.bn_macs + (0 if self.binary else self.macs)


@dataclass(frozen=True)
class MacBreakdown:
    network: str
    input_shape: tuple[int, int, int]
    rows: tuple[LayerMacs, ...]

    @property
    def binary(self) -> int:
        return sum(r.macs for r in self.rows if r.binary)

    @property
    def full_precision(self) -> int:
        return sum(r.full_precision_macs for r in self.rows)

    @property
    def total(self) -> int:
        return self.binary + self.full_precision

    def table(self) -> list[dict]:
        return [
            {
                "layer": r.layer,
                "macs": r.macs,
                "binary": int(r.binary),
                "bn_macs": r.bn_macs,
                "full_precision_macs": r.full_precision_macs,
            }
            for r in self.rows
        ]

    def to_csv(self) -> str:
        return _csv(self.table())

    def summary(self) -> str:
        return (
            f"total={self.total / 1e6:.1f}M binary={self.binary / 1e6:.1f}M "
            f"full_precision={self.full_precision / 1e6:.1f}M"
        )


def mac_breakdown(spec: NetworkSpec, input_shape: Sequence[int] | None = None) -> MacBreakdown:
    """Multiply-accumulates per layer from hyperparameters alone.

    A layer counts as binary when both its weights and its inputs are 1-bit;
    everything else, including the first layer on the raw image, is full
    precision. BatchNorm costs one full-precision MAC per normalized element
    and is charged to the layer it feeds.
    """
    if input_shape is not None:
        spec = spec_with_input(spec, input_shape)
    rows = []
    in_shape: tuple[int, ...] = spec.input_shape
    for layer, out_shape in zip(spec.layers, spec.shapes()):
        macs = bn = 0
        in_elems = 1
        for d in in_shape:
            in_elems *= d
        if layer.kind is LayerKind.CONV:
            h, w, c_out = out_shape
            macs = h * w * c_out * layer.kernel * layer.kernel * in_shape[-1]
        elif layer.kind is LayerKind.FC:
            macs = in_elems * layer.channels
        if layer.batchnorm:
            bn = in_elems
        binary = layer.has_weights and layer.weight_bits == 1 and layer.activation_bits == 1
        rows.append(LayerMacs(layer.name, macs, binary, bn))
        in_shape = out_shape
    return MacBreakdown(spec.name, tuple(spec.input_shape), tuple(rows))


def projected_speedup(
    baseline_macs: float,
    binary_macs: float,
    fp_macs: float,
    binary_factor: float = BINARY_MACS_PER_CYCLE,
) -> float:
    """Speed-up over a full-precision baseline when binary MACs run ``binary_factor`` times faster."""
    if baseline_macs <= 0 or binary_macs < 0 or fp_macs < 0 or binary_factor <= 0:
        raise ValueError("MAC counts must be non-negative and the factor positive")
    denom = binary_macs / binary_factor + fp_macs
    if denom <= 0:
        raise ValueError("network has no MACs")
    return baseline_macs / denom


@dataclass(frozen=True)
class EffReport:
    name: str
    precision: str
    s_p100: float
    size_kib: float

    @property
    def eta_m(self) -> float:
        return memory_efficiency(self.s_p100, self.size_kib)

    def as_dict(self) -> dict:
        return {
            "name": self.name,
            "precision": self.precision,
            "s_p100": round(self.s_p100, 4),
            "size_kib": round(self.size_kib, 4),
            "eta_m": round(self.eta_m, 4),
        }


def efficiency_table(entries: Iterable[EffReport]) -> list[dict]:
    return [e.as_dict() for e in entries]


def efficiency_csv(entries: Iterable[EffReport]) -> str:
    return _csv(efficiency_table(entries))


def precision_label(bits: int) -> str:
    return "Full" if bits == 32 else f"{bits}-bit"
