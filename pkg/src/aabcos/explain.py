"""Contribution maps read off the input-dependent linear map of a B-cos model."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .layers import BcosModel, encode_input, forward
from .pooling import PoolKind
from .tensor import Tensor


@dataclass
class ContributionMap:
    class_id: int
    values: np.ndarray  # H x W, summed over the encoded channel pair
    logit: float
    variant: PoolKind

    @property
    def shape(self):
        return self.values.shape


def _prepare(model: BcosModel, image) -> Tensor:
    dtype = model.parameters()[0].dtype
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    arr = np.asarray(arr, dtype=dtype)
    if arr.ndim == 2:
        arr = arr[None, None]
    elif arr.ndim == 3:
        arr = arr[None]
    if arr.shape[0] != 1:
        raise ValueError("explanations are computed one image at a time")
    x = encode_input(Tensor(arr, dtype=dtype)) if arr.shape[1] == 1 else Tensor(arr, dtype=dtype)
    x.requires_grad = True
    return x


def contribution_maps_all(model: BcosModel, image, classes=None) -> list[ContributionMap]:
    """Maps for every class (or the given ``classes``) from one frozen forward pass.

    Alignment factors are detached, so the gradient of a logit with respect to
    the encoded input is the corresponding row of ``W(x)``; the map is that row
    times the encoded input, reduced over the two encoding channels.
    """
    k = model.config.num_classes
    classes = range(k) if classes is None else list(classes)
    for c in classes:
        if not 0 <= c < k:
            raise ValueError(f"class id {c} outside [0, {k})")
    x = _prepare(model, image)
    logits = forward(model, x, frozen=True)
    maps = []
    for c in classes:
        x.grad = None
        _select(logits.reshape(-1), c).backward()
        contrib = (x.grad * x.data)[0].sum(axis=0)
        maps.append(ContributionMap(c, contrib, float(logits.data[0, c]), model.config.variant))
    return maps


def _select(vec: Tensor, index: int) -> Tensor:
    def backward(g):
        gv = np.zeros_like(vec.data)
        gv[index] = g
        return (gv,)

    return Tensor.from_op(vec.data[index], (vec,), backward)


def contribution_map(model: BcosModel, image, class_id: int) -> ContributionMap:
    return contribution_maps_all(model, image, [class_id])[0]


# file outputs -------------------------------------------------------------

def write_epmap(cmap: ContributionMap, path) -> None:
    """``EPMAP v1 <H> <W> <class_id> <logit>`` header line, then float32 LE values."""
    H, W = cmap.values.shape
    header = f"EPMAP v1 {H} {W} {cmap.class_id} {cmap.logit!r}\n".encode()
    Path(path).write_bytes(header + np.ascontiguousarray(cmap.values, dtype="<f4").tobytes())


def read_epmap(path) -> tuple[np.ndarray, int, float]:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    parts = raw[:nl].decode().split()
    if parts[:2] != ["EPMAP", "v1"] or len(parts) != 6:
        raise ValueError(f"{path}: bad EPMAP header")
    H, W, class_id = int(parts[2]), int(parts[3]), int(parts[4])
    values = np.frombuffer(raw, dtype="<f4", count=H * W, offset=nl + 1).reshape(H, W)
    return values.astype(np.float32), class_id, float(parts[5])


def heatmap_rgb(values: np.ndarray) -> np.ndarray:
    """Diverging colours: white at 0, red for positive, blue for negative, scaled by max |value|."""
    v = np.asarray(values, dtype=np.float64)
    peak = np.abs(v).max()
    v = v / peak if peak > 0 else np.zeros_like(v)
    pos, neg = np.clip(v, 0, 1), np.clip(-v, 0, 1)
    r = 1 - neg
    g = 1 - pos - neg
    b = 1 - pos
    return np.round(np.stack([r, g, b], axis=-1) * 255).astype(np.uint8)


def render_heatmap(cmap: ContributionMap, out_path) -> Path:
    """Write the heatmap PNG and the raw map (same stem, ``.epmap``) next to it."""
    out_path = Path(out_path)
    Image.fromarray(heatmap_rgb(cmap.values), mode="RGB").save(out_path, format="PNG")
    write_epmap(cmap, out_path.with_suffix(".epmap"))
    return out_path
