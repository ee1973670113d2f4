"""Binary-aware training with straight-through estimators.

The trained graph mirrors the frozen inference chain exactly: the first
convolution sees the raw image, later blocks run BatchNorm -> sign ->
binary convolution -> pool, and a full-precision FC head sits on top of the
last pool. The head only shapes the convolutional features during training
and is dropped by :func:`export_extractor`.
"""

from __future__ import annotations

import configparser
import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .arch import LayerKind, LayerSpec, NetworkSpec, same_padding
from .bitcore import pack_bits
from .layers import BatchNormParams
from .network import FrozenLayer, FrozenNetwork

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message if epoch is None else f"epoch {epoch}: {message}")
        self.epoch = epoch


class MissingStatisticsError(ValueError):
    pass


# --------------------------------------------------------------------------
# quantizers with straight-through gradients


class SignActivation(torch.autograd.Function):
    """sign() forward; backward passes the gradient only where |x| <= 1."""

    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return torch.where(x >= 0, torch.ones_like(x), -torch.ones_like(x))

    @staticmethod
    def backward(ctx, grad):
        (x,) = ctx.saved_tensors
        return grad * (x.abs() <= 1).to(grad.dtype)


class SignWeight(torch.autograd.Function):
    """sign() forward; identity backward to the proxy weights."""

    @staticmethod
    def forward(ctx, w):
        return torch.where(w >= 0, torch.ones_like(w), -torch.ones_like(w))

    @staticmethod
    def backward(ctx, grad):
        return grad


def kbit_codes_torch(w: torch.Tensor, k: int) -> torch.Tensor:
    """Integer level codes for k-bit weights, same rule as :func:`bnnvpr.quantize.kbit_codes`."""
    if k == 1:
        return (w >= 0).to(torch.int64)
    n = (1 << k) - 1
    t = torch.tanh(w)
    peak = t.abs().max()
    if peak > 0:
        t = t / peak
    u = (t.clamp(-1, 1) + 1) * 0.5
    return torch.floor(u * n + 0.5).to(torch.int64)


class KBitWeight(torch.autograd.Function):
    @staticmethod
    def forward(ctx, w, k):
        n = (1 << k) - 1
        return 2.0 * kbit_codes_torch(w, k).to(w.dtype) / n - 1.0

    @staticmethod
    def backward(ctx, grad):
        return grad, None


def quantize_weight(w: torch.Tensor, bits: int) -> torch.Tensor:
    if bits == 32:
        return w
    if bits == 1:
        return SignWeight.apply(w)
    return KBitWeight.apply(w, bits)


# --------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    fc_neurons: int = 256
    fc_layers: int = 2
    num_classes: int = 8
    epochs: int = 30
    batch_size: int = 32
    optimizer: str = "sgd"
    lr: float = 0.01
    momentum: float = 0.9
    lr_decay: float = 0.1
    decay_at: float = 2 / 3
    weight_decay: float = 0.0
    seed: int = 0
    bits: int = 0  # 0 keeps each layer's own weight precision
    clip: float = 1.0
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5

    def __post_init__(self) -> None:
        if self.fc_neurons <= 0:
            raise ValueError("fc_neurons must be positive")
        if self.bits not in (0, 1, 2, 4, 8, 32):
            raise ValueError(f"unsupported bit width {self.bits}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.epochs < 0 or self.batch_size <= 0 or self.num_classes <= 1:
            raise ValueError("epochs >= 0, batch_size > 0 and num_classes > 1 are required")

    @classmethod
    def from_text(cls, text: str) -> TrainConfig:
        """Parse ``key = value`` lines (``#`` comments allowed)."""
        parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
        parser.read_string("[train]\n" + text)
        known = {f.name: f for f in fields(cls)}
        values = {}
        for key, raw in parser["train"].items():
            if key not in known:
                raise ValueError(f"unknown config key {key!r}")
            kind = type(getattr(cls(), key))
            values[key] = kind(float(raw)) if kind is int else kind(raw)
        return cls(**values)

    @classmethod
    def from_file(cls, path: str | Path) -> TrainConfig:
        return cls.from_text(Path(path).read_text())

    def to_text(self) -> str:
        return "".join(f"{k} = {v!r}\n" if isinstance(v, float) else f"{k} = {v}\n" for k, v in asdict(self).items())


# --------------------------------------------------------------------------
# training graph


def _pad_for(layer: LayerSpec, h: int, w: int) -> tuple[int, int, int, int]:
    if layer.padding != "same":
        return (0, 0, 0, 0)
    top, bottom = same_padding(h, layer.kernel, layer.stride)
    left, right = same_padding(w, layer.kernel, layer.stride)
    return (left, right, top, bottom)


class ConvBlock(nn.Module):
    def __init__(self, layer: LayerSpec, in_shape: tuple[int, int, int], bits: int, cfg: TrainConfig):
        super().__init__()
        self.layer = layer
        self.bits = bits
        h, w, c_in = in_shape
        self.pad = _pad_for(layer, h, w)
        fan_in = c_in * layer.kernel**2
        fan_out = layer.channels * layer.kernel**2
        bound = min(math.sqrt(6.0 / (fan_in + fan_out)), cfg.clip) if bits != 32 else math.sqrt(1.0 / fan_in)
        self.weight = nn.Parameter(torch.empty(layer.channels, c_in, layer.kernel, layer.kernel).uniform_(-bound, bound))
        self.bn = (
            nn.BatchNorm2d(c_in, eps=cfg.bn_eps, momentum=1 - cfg.bn_momentum) if layer.batchnorm else None
        )

    def forward(self, x):
        if self.bn is not None:
            x = self.bn(x)
        if self.layer.activation_bits == 1:
            x = SignActivation.apply(x)
            pad_value = -1.0
        else:
            if self.bn is not None:
                x = F.relu(x)
            pad_value = 0.0
        if any(self.pad):
            x = F.pad(x, self.pad, value=pad_value)
        return F.conv2d(x, quantize_weight(self.weight, self.bits), stride=self.layer.stride)


class PoolBlock(nn.Module):
    def __init__(self, layer: LayerSpec):
        super().__init__()
        self.layer = layer

    def forward(self, x):
        return F.max_pool2d(x, self.layer.kernel, self.layer.stride)


class BinaryVPRNet(nn.Module):
    """Feature layers from a spec plus a full-precision classification head."""

    def __init__(self, spec: NetworkSpec, cfg: TrainConfig):
        super().__init__()
        self.spec = spec
        blocks = []
        shape: tuple[int, ...] = spec.input_shape
        for layer, out_shape in zip(spec.layers, spec.shapes()):
            if layer.kind is LayerKind.CONV:
                bits = cfg.bits or layer.weight_bits
                blocks.append(ConvBlock(layer, shape, bits, cfg))
            elif layer.kind is LayerKind.POOL:
                blocks.append(PoolBlock(layer))
            else:
                raise ValueError("feature spec must not contain FC layers")
            shape = out_shape
        self.features = nn.ModuleList(blocks)
        n = int(np.prod(shape))
        head: list[nn.Module] = []
        for _ in range(cfg.fc_layers):
            head += [
                nn.Linear(n, cfg.fc_neurons, bias=False),
                nn.BatchNorm1d(cfg.fc_neurons, eps=cfg.bn_eps, momentum=1 - cfg.bn_momentum),
                nn.ReLU(),
            ]
            n = cfg.fc_neurons
        head.append(nn.Linear(n, cfg.num_classes))
        self.head = nn.Sequential(*head)

    def feature_maps(self, x) -> dict[str, torch.Tensor]:
        out = {}
        for block in self.features:
            x = block(x)
            out[block.layer.name] = x
        return out

    def forward(self, x):
        for block in self.features:
            x = block(x)
        # NHWC flatten, same order as the frozen extractor
        return self.head(x.permute(0, 2, 3, 1).flatten(1))

    def quantized_blocks(self) -> list[ConvBlock]:
        return [b for b in self.features if isinstance(b, ConvBlock) and b.bits != 32]

    def clip_proxies(self, bound: float) -> None:
        with torch.no_grad():
            for block in self.quantized_blocks():
                block.weight.clamp_(-bound, bound)


# --------------------------------------------------------------------------
# trained model container


@dataclass
class TrainedModel:
    spec: NetworkSpec
    config: TrainConfig
    state: dict[str, np.ndarray]
    history: list[dict] = field(default_factory=list)

    def to_module(self) -> BinaryVPRNet:
        net = BinaryVPRNet(self.spec, self.config)
        net.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in self.state.items()})
        return net

    @classmethod
    def from_module(cls, net: BinaryVPRNet, cfg: TrainConfig, history: list[dict] | None = None) -> TrainedModel:
        state = {k: v.detach().cpu().numpy().copy() for k, v in net.state_dict().items()}
        return cls(net.spec, cfg, state, list(history or []))

    def proxies(self) -> dict[str, np.ndarray]:
        """Full-precision proxy weights per conv layer, (C_out, C_in, k, k)."""
        out = {}
        for i, layer in enumerate(self.spec.layers):
            if layer.kind is LayerKind.CONV:
                out[layer.name] = self.state[f"features.{i}.weight"]
        return out

    def head_parameter_count(self) -> int:
        return sum(v.size for k, v in self.state.items() if k.startswith("head.") and v.dtype.kind == "f")

    def history_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=["epoch", "step", "loss", "accuracy"], lineterminator="\n")
        writer.writeheader()
        writer.writerows(self.history)
        return buf.getvalue()


# --------------------------------------------------------------------------
# training loop


def _to_nchw(images: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2))).to(dtype)


def init_model(spec: NetworkSpec, cfg: TrainConfig) -> BinaryVPRNet:
    torch.manual_seed(cfg.seed)
    net = BinaryVPRNet(spec.feature_extractor(), cfg)
    net.clip_proxies(cfg.clip)
    return net


def train(
    images: np.ndarray,
    labels: np.ndarray,
    spec: NetworkSpec,
    cfg: TrainConfig,
    on_step: Callable[[dict], None] | None = None,
) -> TrainedModel:
    """Mini-batch training with softmax cross-entropy over place categories.

    ``images`` is ``(N, H, W, C)`` in [0, 1]; ``labels`` are ints in
    ``[0, cfg.num_classes)``. Each logged row holds the running epoch mean of
    loss and accuracy at that step.
    """
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if images.shape[0] == 0:
        raise TrainingError("empty dataset")
    if images.shape[1:] != spec.input_shape:
        raise TrainingError(f"images {images.shape[1:]} do not match network input {spec.input_shape}")
    if not np.all(np.isfinite(images)):
        raise TrainingError("images contain non-finite values")
    if labels.shape != (images.shape[0],):
        raise TrainingError("need exactly one label per image")
    if labels.min() < 0 or labels.max() >= cfg.num_classes:
        raise TrainingError(f"labels outside [0, {cfg.num_classes}); class count mismatch")

    net = init_model(spec, cfg)
    if cfg.optimizer == "adam":
        opt = torch.optim.Adam(net.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    else:
        opt = torch.optim.SGD(net.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    milestone = max(1, int(round(cfg.epochs * cfg.decay_at)))
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, milestones=[milestone], gamma=cfg.lr_decay)

    x_all = _to_nchw(images)
    y_all = torch.from_numpy(labels)
    rng = np.random.default_rng(cfg.seed)
    history: list[dict] = []
    step = 0
    for epoch in range(cfg.epochs):
        net.train()
        order = torch.from_numpy(rng.permutation(len(labels)))
        seen = correct = 0
        loss_sum = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            if len(idx) < 2:
                # BatchNorm needs at least two samples for batch statistics
                continue
            logits = net(x_all[idx])
            loss = F.cross_entropy(logits, y_all[idx])
            if not torch.isfinite(loss):
                raise TrainingError("loss became non-finite", epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            net.clip_proxies(cfg.clip)
            step += 1
            seen += len(idx)
            correct += int((logits.argmax(1) == y_all[idx]).sum())
            loss_sum += loss.item() * len(idx)
            row = {"epoch": epoch, "step": step, "loss": loss_sum / seen, "accuracy": correct / seen}
            history.append(row)
            if on_step:
                on_step(row)
        sched.step()
        if seen:
            log.info("epoch %d loss %.4f acc %.3f", epoch, loss_sum / seen, correct / seen)
    return TrainedModel.from_module(net, cfg, history)


def epoch_summary(history: Sequence[dict]) -> list[dict]:
    """Last logged row of every epoch (running means over the whole epoch)."""
    last: dict[int, dict] = {}
    for row in history:
        last[row["epoch"]] = row
    return [last[e] for e in sorted(last)]


def evaluate_accuracy(model: TrainedModel, images: np.ndarray, labels: np.ndarray, batch: int = 256) -> float:
    """Inference-mode classification accuracy of the full training graph."""
    net = model.to_module().eval()
    x = _to_nchw(np.asarray(images, dtype=np.float32))
    hits = 0
    with torch.no_grad():
        for s in range(0, len(x), batch):
            hits += int((net(x[s : s + batch]).argmax(1).numpy() == labels[s : s + batch]).sum())
    return hits / len(x)


def inference_maps(model: TrainedModel, image: np.ndarray) -> dict[str, np.ndarray]:
    """Eval-mode feature maps of the training graph, float64, as H x W x C arrays."""
    net = model.to_module().double().eval()
    with torch.no_grad():
        maps = net.feature_maps(_to_nchw(np.asarray(image)[None], torch.float64))
    return {k: v[0].permute(1, 2, 0).numpy() for k, v in maps.items()}


# --------------------------------------------------------------------------
# export


def export_extractor(model: TrainedModel) -> FrozenNetwork:
    """Frozen feature extractor: FC head removed, proxies quantized, BN folded on use."""
    net = model.to_module()
    spec = model.spec.feature_extractor()
    frozen = []
    for block, layer in zip(net.features, spec.layers):
        if isinstance(block, PoolBlock):
            frozen.append(FrozenLayer(layer))
            continue
        bits = block.bits
        layer = replace(layer, weight_bits=bits)
        w = block.weight.detach()
        if bits == 32:
            weights = w.permute(0, 2, 3, 1).numpy().astype(np.float32)
        else:
            codes = kbit_codes_torch(w, bits).permute(0, 2, 3, 1).numpy()
            weights = tuple(pack_bits(((codes >> b) & 1).astype(np.uint8)) for b in range(bits))
        bn = None
        if block.bn is not None:
            if int(block.bn.num_batches_tracked) == 0:
                raise MissingStatisticsError(f"{layer.name}: BatchNorm running statistics were never updated")
            bn = BatchNormParams(
                gamma=block.bn.weight.detach().numpy(),
                beta=block.bn.bias.detach().numpy(),
                mean=block.bn.running_mean.numpy(),
                var=block.bn.running_var.numpy(),
                eps=block.bn.eps,
            )
        frozen.append(FrozenLayer(layer, weights, bn))
    spec = replace(spec, layers=tuple(fl.spec for fl in frozen))
    return FrozenNetwork(spec, tuple(frozen), meta={"trained_classes": model.config.num_classes})
