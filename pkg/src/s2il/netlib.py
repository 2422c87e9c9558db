"""Small CNN backbone, multi-proxy cosine head, LSC loss and Grad-CAM importances."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .tensor import GradTape, Tensor

logger = logging.getLogger(__name__)

SNAPSHOT_MAGIC = b"S2MD"
SNAPSHOT_VERSION = 1


@dataclass
class FeatureBundle:
    """Everything one forward pass exposes to the losses.

    ``layers[i]`` holds the (B, C_i, H_i, W_i) output maps of block ``i``;
    ``pooled`` is the global average of the last block; ``similarities`` are
    the per-class cosine similarities before scaling.
    """

    layers: list[Tensor]
    pooled: Tensor
    similarities: Tensor | None = None
    scale: Tensor | None = None
    margin: float = 0.0
    class_ids: list[int] = field(default_factory=list)

    @property
    def last(self) -> Tensor:
        return self.layers[-1]

    @property
    def scores(self) -> Tensor:
        """Pre-softmax class scores (scaled similarities)."""
        if self.similarities is None:
            raise ContractError("bundle was produced without a classifier head")
        return self.similarities * self.scale


LAST_ACTIVATIONS = {"relu": T.relu, "softplus": T.softplus, "none": None}


class Backbone:
    """Stack of conv(3x3, pad 1) -> ReLU -> optional 2x2 max-pool blocks.

    ``last_activation`` picks the nonlinearity of the final block, whose maps
    are the ones distilled and pooled: ``"relu"``, ``"softplus"`` (positive
    but never exactly zero, so no map is permanently silent) or ``"none"``.
    """

    def __init__(self, in_channels: int = 1, channels: Sequence[int] = (16, 32, 64),
                 pool: Sequence[bool] = (True, True, False), image_size: int = 32,
                 kernel_size: int = 3, rng: np.random.Generator | None = None,
                 zero_init: bool = False, last_activation: str = "softplus"):
        if len(pool) != len(channels):
            raise ContractError("pool flags must match the number of conv blocks")
        self.in_channels = in_channels
        self.channels = tuple(int(c) for c in channels)
        self.pool = tuple(bool(p) for p in pool)
        self.image_size = image_size
        self.kernel_size = kernel_size
        if last_activation not in LAST_ACTIVATIONS:
            raise ContractError(f"last_activation must be one of {LAST_ACTIVATIONS}, got {last_activation!r}")
        self.last_activation = last_activation
        side = image_size
        for p in self.pool:
            side = side // 2 if p else side
        if side < 2:
            raise ContractError(f"final feature maps would be {side}x{side}; SSIM needs at least 2x2")
        self.final_size = side
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        cin = in_channels
        for i, cout in enumerate(self.channels):
            fan_in = cin * kernel_size * kernel_size
            if zero_init:
                w = np.zeros((cout, cin, kernel_size, kernel_size))
            else:
                w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, kernel_size, kernel_size))
            self.weights.append(Tensor(w, requires_grad=True, name=f"conv{i}.weight"))
            self.biases.append(Tensor(np.zeros(cout), requires_grad=True, name=f"conv{i}.bias"))
            cin = cout

    @property
    def num_layers(self) -> int:
        return len(self.channels)

    @property
    def out_channels(self) -> int:
        return self.channels[-1]

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def forward(self, x: Tensor) -> list[Tensor]:
        expected = (self.in_channels, self.image_size, self.image_size)
        if x.ndim != 4 or tuple(x.shape[1:]) != expected:
            raise ShapeError(f"backbone expects input (B, {expected[0]}, {expected[1]}, {expected[2]}), got {x.shape}")
        out = []
        h = x
        pad = self.kernel_size // 2
        last = len(self.weights) - 1
        for i, (w, b, p) in enumerate(zip(self.weights, self.biases, self.pool)):
            h = T.conv2d(h, w, b, stride=1, padding=pad)
            if i < last:
                h = T.relu(h)
            elif self.last_activation != "none":
                h = LAST_ACTIVATIONS[self.last_activation](h)
            if p:
                h = T.max_pool2d(h, 2)
            out.append(h)
        return out


class ProxyHead:
    """Growing cosine classifier with ``proxies_per_class`` unit proxies per class.

    Proxy rows for class slot ``k`` live at ``[k*K, (k+1)*K)``. A single
    learnable scale is shared by all slots.
    """

    def __init__(self, dim: int, proxies_per_class: int = 10, margin: float = 0.6,
                 scale_init: float = 1.0, temperature: float = 1.0, scale_min: float = 1.0):
        if proxies_per_class < 1:
            raise ContractError("need at least one proxy per class")
        self.dim = dim
        # the margin pulls the scale down early in training; below zero the ranking inverts
        self.scale_min = float(scale_min)
        self.proxies_per_class = proxies_per_class
        self.margin = float(margin)
        self.temperature = float(temperature)
        self.class_ids: list[int] = []
        self.proxies = Tensor(np.zeros((0, dim)), requires_grad=True, name="head.proxies")
        self.scale = Tensor(float(scale_init), requires_grad=True, name="head.scale")

    @property
    def num_classes(self) -> int:
        return len(self.class_ids)

    def parameters(self) -> list[Tensor]:
        return [self.proxies, self.scale]

    def slot_of(self, labels) -> np.ndarray:
        lookup = {c: i for i, c in enumerate(self.class_ids)}
        try:
            return np.array([lookup[int(c)] for c in np.asarray(labels).reshape(-1)], dtype=np.int64)
        except KeyError as err:
            raise ContractError(f"label {err.args[0]} is not a known class slot") from None

    def grow(self, new_classes: Sequence[int], embeddings: np.ndarray,
             rng: np.random.Generator, jitter: float = 0.01) -> None:
        new_classes = [int(c) for c in new_classes]
        if len(set(new_classes)) != len(new_classes) or set(new_classes) & set(self.class_ids):
            raise ContractError(f"duplicate class ids in head growth: {new_classes}")
        if not new_classes:
            return
        embeddings = np.asarray(embeddings, dtype=np.float64)
        if embeddings.shape != (len(new_classes), self.dim):
            raise ShapeError(f"expected embeddings of shape ({len(new_classes)}, {self.dim}), got {embeddings.shape}")
        rows = []
        for cid, e in zip(new_classes, embeddings):
            norm = np.linalg.norm(e)
            if not norm > 1e-12:
                logger.warning("class %d has a zero-norm embedding; imprinting a random direction", cid)
                e = rng.normal(size=self.dim)
                norm = np.linalg.norm(e)
            base = e / norm
            block = base[None, :] + rng.normal(0.0, jitter, size=(self.proxies_per_class, self.dim))
            rows.append(block / np.linalg.norm(block, axis=1, keepdims=True))
        new = np.concatenate([self.proxies.data] + rows, axis=0).astype(self.proxies.data.dtype)
        self.proxies = Tensor(new, requires_grad=True, name="head.proxies")
        self.class_ids = self.class_ids + new_classes

    def renormalize(self) -> None:
        """Project parameters back after an optimizer step: unit proxies, scale >= scale_min."""
        if self.scale.data < self.scale_min:
            self.scale.data = np.array(self.scale_min, dtype=self.scale.data.dtype)
        if len(self.proxies.data):
            norms = np.linalg.norm(self.proxies.data, axis=1, keepdims=True)
            self.proxies.data = self.proxies.data / np.maximum(norms, 1e-12)

    def similarities(self, pooled: Tensor) -> Tensor:
        """(B, D) features -> (B, num_classes) soft-max-aggregated proxy cosines."""
        if self.num_classes == 0:
            raise ContractError("head has no class slots yet")
        feats = T.l2_normalize(pooled, axis=1)
        prox = T.l2_normalize(self.proxies, axis=1)
        cos = T.reshape(T.matmul(feats, T.transpose(prox)), (pooled.shape[0], self.num_classes, self.proxies_per_class))
        attn = T.softmax(cos * (1.0 / self.temperature), axis=-1)
        return T.tsum(attn * cos, axis=-1)


class Model:
    """Backbone F, global average pooling G and proxy head H."""

    def __init__(self, backbone: Backbone, head: ProxyHead):
        if head.dim != backbone.out_channels:
            raise ContractError("head dimension must equal the backbone's final channel count")
        self.backbone = backbone
        self.head = head

    @classmethod
    def build(cls, in_channels: int = 1, channels: Sequence[int] = (16, 32, 64),
              pool: Sequence[bool] = (True, True, False), image_size: int = 32,
              proxies_per_class: int = 10, margin: float = 0.6, scale_init: float = 1.0,
              scale_min: float = 1.0, temperature: float = 1.0, last_activation: str = "softplus",
              seed: int = 0, zero_init: bool = False) -> "Model":
        rng = np.random.default_rng(seed)
        bb = Backbone(in_channels, channels, pool, image_size, rng=rng, zero_init=zero_init,
                      last_activation=last_activation)
        return cls(bb, ProxyHead(bb.out_channels, proxies_per_class, margin, scale_init, temperature, scale_min))

    def parameters(self) -> list[Tensor]:
        return self.backbone.parameters() + self.head.parameters()

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for i, (w, b) in enumerate(zip(self.backbone.weights, self.backbone.biases)):
            out += [(f"conv{i}.weight", w.data), (f"conv{i}.bias", b.data)]
        out += [("head.proxies", self.head.proxies.data), ("head.scale", self.head.scale.data)]
        return out

    def forward(self, x, with_head: bool = True) -> FeatureBundle:
        x = T.as_tensor(x)
        layers = self.backbone.forward(x)
        pooled = T.global_avg_pool(layers[-1])
        bundle = FeatureBundle(layers, pooled, margin=self.head.margin, class_ids=list(self.head.class_ids))
        if with_head and self.head.num_classes:
            bundle.similarities = self.head.similarities(pooled)
            bundle.scale = self.head.scale
        return bundle

    __call__ = forward

    def scores_from_maps(self, last_maps: Tensor) -> Tensor:
        return self.head.similarities(T.global_avg_pool(last_maps)) * self.head.scale

    def copy(self) -> "Model":
        return load_snapshot(save_snapshot(self))

    def checksum(self) -> str:
        return hashlib.sha256(save_snapshot(self)).hexdigest()


# ----------------------------------------------------------------------------
# head growth and loss


def class_embeddings(model: Model, x: np.ndarray, y: np.ndarray, classes: Sequence[int],
                     batch_size: int = 256) -> np.ndarray:
    """Mean pooled feature per class, computed with the current backbone."""
    pooled = extract_pooled(model, x, batch_size)
    out = np.zeros((len(classes), model.head.dim))
    for i, c in enumerate(classes):
        sel = pooled[y == c]
        if len(sel) == 0:
            raise ContractError(f"no samples for class {c} to imprint from")
        out[i] = sel.mean(axis=0)
    return out


def extract_pooled(model: Model, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    chunks = [model.forward(Tensor(x[i:i + batch_size]), with_head=False).pooled.data
              for i in range(0, len(x), batch_size)]
    return np.concatenate(chunks, axis=0) if chunks else np.zeros((0, model.head.dim))


def grow_head(head: ProxyHead, new_classes: Sequence[int], class_embeddings: np.ndarray,
              rng: np.random.Generator | None = None, jitter: float = 0.01) -> ProxyHead:
    """Add ``len(new_classes)`` slots imprinted from normalized class means."""
    head.grow(new_classes, class_embeddings, rng if rng is not None else np.random.default_rng(0), jitter)
    return head


def lsc_loss(bundle: FeatureBundle, labels) -> Tensor:
    """Local-similarity-classifier loss: margin softmax over scaled proxy similarities."""
    if bundle.similarities is None:
        raise ContractError("bundle has no class similarities")
    sims = bundle.similarities
    lookup = {c: i for i, c in enumerate(bundle.class_ids)}
    labels = np.asarray(labels).reshape(-1)
    if len(labels) != sims.shape[0]:
        raise ShapeError(f"{len(labels)} labels for a batch of {sims.shape[0]}")
    try:
        slots = np.array([lookup[int(c)] for c in labels], dtype=np.int64)
    except KeyError as err:
        raise ContractError(f"label {err.args[0]} is outside the known classes") from None
    onehot = np.zeros(sims.shape, dtype=sims.data.dtype)
    onehot[np.arange(len(slots)), slots] = 1.0
    logits = (sims - onehot * bundle.margin) * bundle.scale
    logp = T.log_softmax(logits, axis=1)
    picked = T.tsum(logp * onehot, axis=1)
    return -T.mean(picked)


# ----------------------------------------------------------------------------
# Grad-CAM


def gradcam_importance(model: Model, samples, target: int,
                       score_fn: Callable[[Tensor], Tensor] | None = None,
                       score: str = "logit") -> np.ndarray:
    """Per-channel importance of the last conv maps for class ``target``.

    Averages d(score_target)/d(map) over spatial positions and then over the
    samples. ``score="logit"`` differentiates the pre-softmax score,
    ``"prob"`` the softmax probability. ``score_fn`` replaces the model's
    head (maps -> (B, n_classes) scores) and then ``target`` is a column index.
    """
    x = np.asarray(samples.data if isinstance(samples, Tensor) else samples)
    if len(x) == 0:
        raise ContractError("Grad-CAM needs at least one sample")
    last = model.backbone.forward(Tensor(x))[-1]
    leaf = Tensor(last.data, requires_grad=True)
    if score_fn is None:
        col = int(model.head.slot_of([target])[0])
        fn = model.scores_from_maps
    else:
        col = int(target)
        fn = score_fn
    with GradTape() as tape:
        scores = fn(leaf)
        if score == "prob":
            scores = T.softmax(scores, axis=1)
        elif score != "logit":
            raise ContractError(f"unknown Grad-CAM score kind {score!r}")
        total = T.tsum(scores[:, col])
    grad = tape.gradient(total, [leaf])[0]
    return grad.mean(axis=(2, 3)).mean(axis=0)


# ----------------------------------------------------------------------------
# snapshot container
#
# magic "S2MD" | u16 version | u32 meta length | meta JSON (utf-8)
# u32 tensor count, then per tensor: u16 name length | name | u8 ndim |
#   u32 dims[ndim] | float64 little-endian data
# u32 class count | u32 class ids[count]


def save_snapshot(model: Model) -> bytes:
    bb, head = model.backbone, model.head
    meta = {
        "in_channels": bb.in_channels, "channels": list(bb.channels), "pool": list(bb.pool),
        "image_size": bb.image_size, "kernel_size": bb.kernel_size, "last_activation": bb.last_activation,
        "proxies_per_class": head.proxies_per_class, "margin": head.margin,
        "temperature": head.temperature, "scale_min": head.scale_min,
    }
    buf = io.BytesIO()
    mb = json.dumps(meta, sort_keys=True).encode()
    buf.write(SNAPSHOT_MAGIC + struct.pack("<HI", SNAPSHOT_VERSION, len(mb)) + mb)
    arrays = model.named_arrays()
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays:
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    buf.write(struct.pack("<I", len(head.class_ids)))
    buf.write(struct.pack(f"<{len(head.class_ids)}I", *head.class_ids))
    return buf.getvalue()


def load_snapshot(blob: bytes) -> Model:
    view = memoryview(blob)
    if bytes(view[:4]) != SNAPSHOT_MAGIC:
        raise ContractError("not a model snapshot (bad magic)")
    version, mlen = struct.unpack_from("<HI", view, 4)
    if version != SNAPSHOT_VERSION:
        raise ContractError(f"unsupported snapshot version {version}")
    pos = 10
    meta = json.loads(bytes(view[pos:pos + mlen]))
    pos += mlen
    (count,) = struct.unpack_from("<I", view, pos)
    pos += 4
    arrays = {}
    dtype = T.get_default_dtype()
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", view, pos)
        pos += 2
        name = bytes(view[pos:pos + nlen]).decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<B", view, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", view, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(view, dtype="<f8", count=n, offset=pos).reshape(shape).astype(dtype)
        pos += 8 * n
    (ncls,) = struct.unpack_from("<I", view, pos)
    pos += 4
    class_ids = list(struct.unpack_from(f"<{ncls}I", view, pos))
    bb = Backbone(meta["in_channels"], meta["channels"], meta["pool"], meta["image_size"],
                  meta["kernel_size"], zero_init=True, last_activation=meta["last_activation"])
    for i in range(bb.num_layers):
        bb.weights[i] = Tensor(arrays[f"conv{i}.weight"], requires_grad=True, name=f"conv{i}.weight")
        bb.biases[i] = Tensor(arrays[f"conv{i}.bias"], requires_grad=True, name=f"conv{i}.bias")
    head = ProxyHead(bb.out_channels, meta["proxies_per_class"], meta["margin"],
                     temperature=meta["temperature"], scale_min=meta["scale_min"])
    head.proxies = Tensor(arrays["head.proxies"], requires_grad=True, name="head.proxies")
    head.scale = Tensor(arrays["head.scale"], requires_grad=True, name="head.scale")
    head.class_ids = class_ids
    return Model(bb, head)
