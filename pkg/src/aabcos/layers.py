"""B-cos layers and the bias-free model built from them."""
from __future__ import annotations

import dataclasses
import enum
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .pooling import PoolKind, PoolVariant
from .tensor import Tensor, conv2d, power, reshape, sqrt, tabs, tsum


class Mode(str, enum.Enum):
    MULTICLASS = "multiclass"
    MULTILABEL = "multilabel"


@dataclass
class BcosConvConfig:
    in_channels: int
    out_units: int
    kernel_h: int = 3
    kernel_w: int = 3
    stride: int = 1
    padding: int = 1
    B: float = 2.0
    maxout_group: int = 2
    norm_epsilon: float = 1e-6

    def __post_init__(self):
        if self.B < 1:
            raise ValueError(f"B must be >= 1, got {self.B}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.maxout_group < 1 or self.out_units % self.maxout_group:
            raise ValueError(
                f"out_units={self.out_units} not divisible by maxout_group={self.maxout_group}")

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_units, self.in_channels, self.kernel_h, self.kernel_w)


def encode_input(image) -> Tensor:
    """Map a ``[N,1,H,W]`` image in [0,1] to the two-channel ``[x, 1-x]`` encoding."""
    x = image if isinstance(image, Tensor) else Tensor(image)
    if x.ndim != 4 or x.shape[1] != 1:
        raise ValueError(f"expected [N,1,H,W] input, got {x.shape}")
    if x.data.min() < 0 or x.data.max() > 1:
        raise ValueError("input values must lie in [0, 1]")
    return Tensor(np.concatenate([x.data, 1 - x.data], axis=1), dtype=x.dtype)


def unit_normalize(weights: Tensor) -> Tensor:
    return weights / sqrt(tsum(weights * weights, axis=(1, 2, 3), keepdims=True))


def bcos_conv_forward(x: Tensor, cfg: BcosConvConfig, weights: Tensor, frozen: bool = False) -> Tensor:
    """``y = |cos(p, w)|**(B-1) * (w . p)`` for every patch ``p`` and unit-norm unit ``w``.

    With ``frozen=True`` the alignment factor and the weights are detached, so
    the layer acts as the fixed linear map ``W(x)`` during backward.  The cosine uses
    ``|p| + norm_epsilon`` in the denominator; a zero patch gives 0.
    """
    if weights.shape != cfg.weight_shape:
        raise ValueError(f"weights shaped {weights.shape}, config expects {cfg.weight_shape}")
    if frozen:
        weights = weights.detach()
    w_hat = unit_normalize(weights)
    lin = conv2d(x, w_hat, cfg.stride, cfg.padding)
    if cfg.B == 1:
        return lin
    ones = Tensor(np.ones((1, cfg.in_channels, cfg.kernel_h, cfg.kernel_w)), dtype=x.dtype)
    norm = sqrt(conv2d(x * x, ones, cfg.stride, cfg.padding)) + cfg.norm_epsilon
    scale = power(tabs(lin / norm), cfg.B - 1)
    if frozen:
        scale = scale.detach()
    return scale * lin


def dynamic_weights(x: Tensor, cfg: BcosConvConfig, weights: Tensor) -> np.ndarray:
    """Per-position effective linear weights ``|cos|**(B-1) * w_hat``, shape ``[N,K,Ho,Wo,C,kh,kw]``."""
    w_hat = unit_normalize(weights).data
    lin = conv2d(x, Tensor(w_hat, dtype=x.dtype), cfg.stride, cfg.padding).data
    if cfg.B == 1:
        scale = np.ones_like(lin)
    else:
        ones = np.ones((1, cfg.in_channels, cfg.kernel_h, cfg.kernel_w), dtype=x.dtype)
        sq = conv2d(Tensor(x.data * x.data, dtype=x.dtype), Tensor(ones, dtype=x.dtype),
                    cfg.stride, cfg.padding).data
        scale = np.abs(lin / (np.sqrt(sq) + cfg.norm_epsilon)) ** (cfg.B - 1)
    return scale[..., None, None, None] * w_hat[None, :, None, None]


def maxout(x: Tensor, group: int = 2) -> Tensor:
    """Max over consecutive channel groups; ties go to the lower channel index."""
    N, C, H, W = x.shape
    if C % group:
        raise ValueError(f"{C} channels not divisible by maxout group {group}")
    grouped = x.data.reshape(N, C // group, group, H, W)
    idx = grouped.argmax(axis=2)[:, :, None]
    out = np.take_along_axis(grouped, idx, axis=2)[:, :, 0]

    def backward(g):
        gx = np.zeros_like(grouped)
        np.put_along_axis(gx, idx, g[:, :, None], axis=2)
        return (gx.reshape(N, C, H, W),)

    return Tensor.from_op(out, (x,), backward)


# layer records ------------------------------------------------------------

@dataclass
class BcosConv:
    cfg: BcosConvConfig
    weight: Tensor

    def __call__(self, x, frozen=False):
        return bcos_conv_forward(x, self.cfg, self.weight, frozen)


@dataclass
class MaxOut:
    group: int = 2

    def __call__(self, x, frozen=False):
        return maxout(x, self.group)


@dataclass
class AntiAliasPool:
    variant: PoolVariant

    def __call__(self, x, frozen=False):
        return self.variant(x)


@dataclass
class GlobalAvgPool:
    def __call__(self, x, frozen=False):
        return x.mean(axis=(2, 3), keepdims=True)


@dataclass
class BcosHead:
    cfg: BcosConvConfig
    weight: Tensor
    logit_scale: float = 1.0

    def __call__(self, x, frozen=False):
        y = bcos_conv_forward(x, self.cfg, self.weight, frozen)
        y = reshape(y, (y.shape[0], y.shape[1]))
        return y * self.logit_scale if self.logit_scale != 1.0 else y


@dataclass
class ModelConfig:
    num_classes: int = 2
    input_size: int = 32
    widths: tuple[int, ...] = (16, 32, 64)
    variant: PoolKind = PoolKind.FLC
    mode: Mode = Mode.MULTICLASS
    B: float = 2.0
    kernel_size: int = 3
    maxout_group: int = 2
    norm_epsilon: float = 1e-6
    logit_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.variant = PoolKind(self.variant)
        self.mode = Mode(self.mode)
        self.widths = tuple(int(w) for w in self.widths)


@dataclass
class BcosModel:
    config: ModelConfig
    layers: list = field(default_factory=list)

    def parameters(self) -> list[Tensor]:
        return [layer.weight for layer in self.layers if hasattr(layer, "weight")]

    def __call__(self, image, frozen: bool = False) -> Tensor:
        return forward(self, image, frozen)

    def astype(self, dtype) -> "BcosModel":
        """Copy of the model with parameters cast to ``dtype``."""
        clone = build_model(self.config)
        for dst, src in zip(clone.parameters(), self.parameters()):
            dst.data = src.data.astype(dtype)
        return clone


def build_model(config: ModelConfig, dtype=None) -> BcosModel:
    """Default topology: encode -> [conv, MaxOut, pool] x len(widths) -> GAP -> B-cos head.

    The strided variant folds the reduction into the convolution (stride 2);
    anti-aliased variants use a stride-1 convolution followed by pooling.
    """
    rng = np.random.default_rng(config.seed)
    layers: list = []
    in_ch = 2
    k = config.kernel_size
    strided = config.variant is PoolKind.STRIDED
    for width in config.widths:
        cfg = BcosConvConfig(in_ch, width * config.maxout_group, k, k,
                             stride=2 if strided else 1, padding=k // 2, B=config.B,
                             maxout_group=config.maxout_group, norm_epsilon=config.norm_epsilon)
        layers.append(BcosConv(cfg, _init_weight(rng, cfg, dtype)))
        layers.append(MaxOut(config.maxout_group))
        if not strided:
            layers.append(AntiAliasPool(PoolVariant(config.variant, 2)))
        in_ch = width
    layers.append(GlobalAvgPool())
    head = BcosConvConfig(in_ch, config.num_classes, 1, 1, stride=1, padding=0, B=config.B,
                          maxout_group=1, norm_epsilon=config.norm_epsilon)
    layers.append(BcosHead(head, _init_weight(rng, head, dtype), config.logit_scale))
    return BcosModel(config, layers)


def _init_weight(rng, cfg: BcosConvConfig, dtype) -> Tensor:
    fan_in = cfg.in_channels * cfg.kernel_h * cfg.kernel_w
    w = rng.standard_normal(cfg.weight_shape) / np.sqrt(fan_in)
    return Tensor(w, requires_grad=True, dtype=dtype)


def forward(model: BcosModel, image, frozen: bool = False) -> Tensor:
    """Logits ``[N, num_classes]`` for a ``[N,1,H,W]`` image or an already encoded ``[N,2,H,W]`` tensor."""
    x = image if isinstance(image, Tensor) else Tensor(image, dtype=model.parameters()[0].dtype)
    if x.ndim != 4:
        raise ValueError(f"expected a 4-d input, got {x.shape}")
    size = model.config.input_size
    if x.shape[-2:] != (size, size):
        raise ValueError(f"model expects {size}x{size} inputs, got {x.shape[-2]}x{x.shape[-1]}")
    if x.shape[1] == 1:
        x = encode_input(x)
    for layer in model.layers:
        x = layer(x, frozen)
    return x


# checkpoints --------------------------------------------------------------

_MAGIC = "BCOSMODEL v1"
_MODEL_KEYS = {
    "num_classes": int, "input_size": int, "variant": str, "mode": str, "B": float,
    "kernel_size": int, "maxout_group": int, "norm_epsilon": float, "logit_scale": float,
    "seed": int,
}


def save_checkpoint(model: BcosModel, path, extra: dict | None = None) -> None:
    """Write ``BCOSMODEL v1``, ``key=value`` lines, ``END``, then float32 LE weights."""
    cfg = model.config
    heads = [l for l in model.layers if isinstance(l, BcosHead)]
    if heads:  # the live head scale wins over the build-time setting
        cfg = dataclasses.replace(cfg, logit_scale=float(heads[-1].logit_scale))
    lines = [_MAGIC]
    for key in _MODEL_KEYS:
        value = getattr(cfg, key)
        lines.append(f"{key}={value.value if isinstance(value, enum.Enum) else repr(value) if isinstance(value, float) else value}")
    lines.append("widths=" + ",".join(str(w) for w in cfg.widths))
    for i, layer in enumerate(model.layers):
        lines.append(f"layer.{i}={_describe(layer)}")
    for key, value in (extra or {}).items():
        lines.append(f"extra.{key}={value}")
    lines.append("END")
    buf = io.BytesIO()
    buf.write(("\n".join(lines) + "\n").encode())
    for p in model.parameters():
        buf.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def _describe(layer) -> str:
    if isinstance(layer, (BcosConv, BcosHead)):
        c = layer.cfg
        name = "bcos_head" if isinstance(layer, BcosHead) else "bcos_conv"
        return (f"{name} in={c.in_channels} out={c.out_units} k={c.kernel_h}x{c.kernel_w} "
                f"stride={c.stride} pad={c.padding}")
    if isinstance(layer, MaxOut):
        return f"maxout group={layer.group}"
    if isinstance(layer, AntiAliasPool):
        return f"pool kind={layer.variant.kind.value} stride={layer.variant.stride}"
    return "global_avg_pool"


def load_checkpoint(path) -> tuple[BcosModel, dict]:
    raw = Path(path).read_bytes()
    marker = b"\nEND\n"
    end = raw.find(marker)
    if not raw.startswith(_MAGIC.encode()) or end < 0:
        raise ValueError(f"{path}: not a {_MAGIC} checkpoint")
    header = raw[:end].decode().splitlines()[1:]
    blob = raw[end + len(marker):]
    kwargs, extra = {}, {}
    for line in header:
        key, _, value = line.partition("=")
        if key in _MODEL_KEYS:
            kwargs[key] = _MODEL_KEYS[key](value)
        elif key == "widths":
            kwargs["widths"] = tuple(int(v) for v in value.split(","))
        elif key.startswith("extra."):
            extra[key[6:]] = value
        elif not key.startswith("layer."):
            raise ValueError(f"{path}: unknown checkpoint key {key!r}")
    model = build_model(ModelConfig(**kwargs))
    offset = 0
    for p in model.parameters():
        n = p.data.size * 4
        if offset + n > len(blob):
            raise ValueError(f"{path}: truncated weight data")
        p.data = np.frombuffer(blob, dtype="<f4", count=p.data.size, offset=offset).reshape(p.shape).astype(np.float32)
        offset += n
    if offset != len(blob):
        raise ValueError(f"{path}: {len(blob) - offset} trailing bytes")
    return model, extra
