"""Small convolutional classifier with hand-written backpropagation.

Layout: [conv3x3 (pad 1) -> ReLU -> maxpool 2x2] per stage, then one fully
connected layer to the logits. Parameters are float32 (the checkpoint format
stores float32 losslessly); computation runs in float64 for attacks and
gradient checks and in float32 during training.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .imagecore import FormatError, InvalidInputError, SeedStream, parse_tensor, tensor_bytes

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"ADVC"
CHECKPOINT_VERSION = 1


class CheckpointVersionError(FormatError):
    pass


@dataclass(frozen=True)
class Architecture:
    conv_channels: tuple[int, ...] = (16, 32)
    num_classes: int = 10
    input_shape: tuple[int, int, int] = (32, 32, 3)
    name: str = "a"

    def __post_init__(self):
        h, w, _ = self.input_shape
        scale = 2 ** len(self.conv_channels)
        if h % scale or w % scale:
            raise InvalidInputError(f"input {self.input_shape} not divisible by pooling factor {scale}")
        if self.num_classes < 2:
            raise InvalidInputError("need at least two classes")

    @property
    def feature_dim(self) -> int:
        h, w, _ = self.input_shape
        scale = 2 ** len(self.conv_channels)
        return (h // scale) * (w // scale) * self.conv_channels[-1]

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        cin = self.input_shape[2]
        for i, cout in enumerate(self.conv_channels):
            shapes[f"conv{i}.w"] = (3, 3, cin, cout)
            shapes[f"conv{i}.b"] = (cout,)
            cin = cout
        shapes["fc.w"] = (self.feature_dim, self.num_classes)
        shapes["fc.b"] = (self.num_classes,)
        return shapes

    def to_json(self) -> str:
        return json.dumps(
            {
                "conv_channels": list(self.conv_channels),
                "num_classes": self.num_classes,
                "input_shape": list(self.input_shape),
                "name": self.name,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "Architecture":
        d = json.loads(text)
        return cls(tuple(d["conv_channels"]), d["num_classes"], tuple(d["input_shape"]), d["name"])


ARCH_A = Architecture((16, 32), name="a")
# wider, one stage deeper; the target model for transfer experiments
ARCH_B = Architecture((24, 48, 48), name="b")
ARCHITECTURES = {"a": ARCH_A, "b": ARCH_B}


def init_params(arch: Architecture, stream: SeedStream) -> dict[str, np.ndarray]:
    """Glorot-uniform weights, zero biases."""
    rng = stream.generator()
    params = {}
    for name, shape in arch.param_shapes().items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, np.float32)
            continue
        if len(shape) == 4:
            fan_in, fan_out = 9 * shape[2], 9 * shape[3]
        else:
            fan_in, fan_out = shape
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        params[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
    return params


def zero_params(arch: Architecture) -> dict[str, np.ndarray]:
    return {k: np.zeros(s, np.float32) for k, s in arch.param_shapes().items()}


# -- layers -----------------------------------------------------------------


_TAPS = [(i, j) for i in range(3) for j in range(3)]


def _conv_forward(x, w, b):
    n, h, wd, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    # columns ordered (tap row, tap col, channel), matching w of shape (3, 3, C, F)
    cols = np.ascontiguousarray(sliding_window_view(xp, (3, 3), axis=(1, 2)).transpose(0, 1, 2, 4, 5, 3))
    cols = cols.reshape(n * h * wd, 9 * c)
    wm = w.reshape(9 * c, -1)
    out = cols @ wm + b
    return out.reshape(n, h, wd, -1), (cols, w, x.shape)


def _conv_backward(dout, cache, need_params=True, need_input=True):
    cols, w, (n, h, wd, c) = cache
    d2 = dout.reshape(n * h * wd, -1)
    grads = None
    if need_params:
        grads = ((cols.T @ d2).reshape(w.shape), d2.sum(axis=0))
    if not need_input:
        return None, grads
    dcols = (d2 @ w.reshape(9 * c, -1).T).reshape(n, h, wd, 3, 3, c)
    dxp = np.zeros((n, h + 2, wd + 2, c), dout.dtype)
    for i, j in _TAPS:
        dxp[:, i : i + h, j : j + wd, :] += dcols[:, :, :, i, j, :]
    return dxp[:, 1:-1, 1:-1, :], grads


def _pool_forward(x):
    # window elements in (row, col) scan order; ties go to the first maximum
    quads = (x[:, 0::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 0::2], x[:, 1::2, 1::2])
    out = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))
    taken = np.zeros(out.shape, bool)
    masks = []
    for q in quads:
        m = (q == out) & ~taken
        taken |= m
        masks.append(m)
    return out, (masks, x.shape)


def _pool_backward(dout, cache):
    masks, shape = cache
    dx = np.zeros(shape, dout.dtype)
    for (oy, ox), m in zip(((0, 0), (0, 1), (1, 0), (1, 1)), masks):
        dx[:, oy::2, ox::2] = dout * m
    return dx


def _forward(params, arch: Architecture, x, dtype):
    caches = []
    a = x.astype(dtype, copy=False)
    for i in range(len(arch.conv_channels)):
        z, conv_cache = _conv_forward(a, params[f"conv{i}.w"].astype(dtype), params[f"conv{i}.b"].astype(dtype))
        relu_mask = z > 0
        a, pool_cache = _pool_forward(z * relu_mask)
        caches.append((conv_cache, relu_mask, pool_cache))
    feat = a.reshape(len(a), -1)
    fc_w = params["fc.w"].astype(dtype)
    logits = feat @ fc_w + params["fc.b"].astype(dtype)
    return logits, (caches, feat, fc_w, a.shape)


def _backward(cache, dlogits, need_params=False, need_input=True):
    caches, feat, fc_w, feat_shape = cache
    grads = {}
    if need_params:
        grads["fc.w"] = feat.T @ dlogits
        grads["fc.b"] = dlogits.sum(axis=0)
    da = (dlogits @ fc_w.T).reshape(feat_shape)
    for i in reversed(range(len(caches))):
        conv_cache, relu_mask, pool_cache = caches[i]
        dz = _pool_backward(da, pool_cache) * relu_mask
        da, pg = _conv_backward(dz, conv_cache, need_params, need_input or i > 0)
        if need_params:
            grads[f"conv{i}.w"], grads[f"conv{i}.b"] = pg
    return da, grads


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-example softmax cross-entropy."""
    z = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    return lse - z[np.arange(len(z)), labels]


def argmax_lowest(logits: np.ndarray) -> np.ndarray:
    # np.argmax already returns the first (lowest-index) maximum
    return np.argmax(logits, axis=-1)


# -- model ------------------------------------------------------------------


@dataclass
class SmallNet:
    """A classifier h(.) exposing logits and exact input gradients.

    All methods accept a single image (H, W, C) or a batch (N, H, W, C) and
    return results with the matching leading shape.
    """

    arch: Architecture
    params: dict[str, np.ndarray]
    tag: str = ""
    batch_size: int = 256
    history: list[float] = field(default_factory=list)
    dtype: type = np.float64

    def _batch(self, x):
        x = np.asarray(x)
        single = x.ndim == 3
        xb = x[None] if single else x
        if xb.ndim != 4 or xb.shape[1:] != self.arch.input_shape:
            raise InvalidInputError(f"expected input shape {self.arch.input_shape}, got {x.shape}")
        if not np.all(np.isfinite(xb)):
            raise InvalidInputError("input contains non-finite values")
        return xb, single

    def _labels(self, y, n):
        y = np.broadcast_to(np.asarray(y, dtype=np.int64), (n,))
        if np.any(y < 0) or np.any(y >= self.arch.num_classes):
            raise InvalidInputError(f"label out of range [0, {self.arch.num_classes})")
        return y

    def forward(self, x) -> np.ndarray:
        xb, single = self._batch(x)
        out = np.concatenate(
            [_forward(self.params, self.arch, xb[i : i + self.batch_size], self.dtype)[0] for i in range(0, len(xb), self.batch_size)]
        )
        return out[0] if single else out

    logits = forward

    def predict(self, x):
        return argmax_lowest(self.forward(x))

    def probabilities(self, x) -> np.ndarray:
        return softmax(self.forward(x))

    def loss_and_input_gradient(self, x, y):
        """Cross-entropy loss and its gradient w.r.t. every input element."""
        xb, single = self._batch(x)
        yb = self._labels(y, len(xb))
        losses, grads = [], []
        for i in range(0, len(xb), self.batch_size):
            logits, cache = _forward(self.params, self.arch, xb[i : i + self.batch_size], self.dtype)
            yy = yb[i : i + self.batch_size]
            losses.append(cross_entropy(logits, yy))
            d = softmax(logits)
            d[np.arange(len(yy)), yy] -= 1.0
            grads.append(_backward(cache, d.astype(self.dtype))[0])
        loss, grad = np.concatenate(losses), np.concatenate(grads)
        return (loss[0], grad[0]) if single else (loss, grad)

    def logit_jacobian(self, x) -> np.ndarray:
        """Gradients of every logit: shape (K, H, W, C) or (N, K, H, W, C)."""
        xb, single = self._batch(x)
        k = self.arch.num_classes
        eye = np.eye(k)
        chunk = max(1, self.batch_size // k)
        out = []
        for i in range(0, len(xb), chunk):
            part = xb[i : i + chunk]
            rep = np.repeat(part, k, axis=0)
            _, cache = _forward(self.params, self.arch, rep, self.dtype)
            g = _backward(cache, np.tile(eye, (len(part), 1)).astype(self.dtype))[0]
            out.append(g.reshape((len(part), k) + g.shape[1:]))
        jac = np.concatenate(out)
        return jac[0] if single else jac

    def vjp(self, x, dlogits) -> np.ndarray:
        """Input gradient of sum_k dlogits[n, k] * Z(x_n)_k for each image."""
        xb, single = self._batch(x)
        d = np.asarray(dlogits, np.float64).reshape(len(xb), self.arch.num_classes)
        outs = []
        for i in range(0, len(xb), self.batch_size):
            _, cache = _forward(self.params, self.arch, xb[i : i + self.batch_size], self.dtype)
            outs.append(_backward(cache, d[i : i + self.batch_size].astype(self.dtype))[0])
        g = np.concatenate(outs).astype(np.float64, copy=False)
        return g[0] if single else g

    def logit_gradient(self, x, k: int) -> np.ndarray:
        """Exact gradient of logit k w.r.t. the input."""
        self._labels(k, 1)
        n = 1 if np.ndim(x) == 3 else len(x)
        d = np.zeros((n, self.arch.num_classes))
        d[:, k] = 1.0
        return self.vjp(x, d)


@dataclass
class LinearModel:
    """Affine classifier Z(x) = x.flat @ W + b, with the same interface as SmallNet.

    Handy for analytic checks of the attacks.
    """

    weight: np.ndarray  # (D, K)
    bias: np.ndarray  # (K,)
    input_shape: tuple[int, ...]
    tag: str = "linear"

    @property
    def num_classes(self) -> int:
        return self.weight.shape[1]

    def _batch(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.shape == tuple(self.input_shape)
        xb = x[None] if single else x
        if xb.shape[1:] != tuple(self.input_shape):
            raise InvalidInputError(f"expected input shape {self.input_shape}, got {x.shape}")
        return xb, single

    def forward(self, x):
        xb, single = self._batch(x)
        out = xb.reshape(len(xb), -1) @ self.weight + self.bias
        return out[0] if single else out

    logits = forward

    def predict(self, x):
        return argmax_lowest(self.forward(x))

    def probabilities(self, x):
        return softmax(self.forward(x))

    def loss_and_input_gradient(self, x, y):
        xb, single = self._batch(x)
        yb = np.broadcast_to(np.asarray(y, dtype=np.int64), (len(xb),))
        logits = xb.reshape(len(xb), -1) @ self.weight + self.bias
        d = softmax(logits)
        d[np.arange(len(xb)), yb] -= 1.0
        grad = (d @ self.weight.T).reshape(xb.shape)
        loss = cross_entropy(logits, yb)
        return (loss[0], grad[0]) if single else (loss, grad)

    def logit_jacobian(self, x):
        xb, single = self._batch(x)
        jac = np.broadcast_to(self.weight.T.reshape((1, self.num_classes) + tuple(self.input_shape)), (len(xb), self.num_classes) + tuple(self.input_shape)).copy()
        return jac[0] if single else jac

    def vjp(self, x, dlogits):
        xb, single = self._batch(x)
        d = np.asarray(dlogits, np.float64).reshape(len(xb), self.num_classes)
        g = (d @ self.weight.T).reshape(xb.shape)
        return g[0] if single else g

    def logit_gradient(self, x, k):
        jac = self.logit_jacobian(x)
        return np.take(jac, k, axis=jac.ndim - len(self.input_shape) - 1)


# -- training ---------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    crop_fraction: float = 0.9
    flip: bool = True
    # when set, each mini-batch draws its crop fraction from [min_crop_fraction, crop_fraction]
    min_crop_fraction: Optional[float] = None

    def __post_init__(self):
        lo = self.crop_fraction if self.min_crop_fraction is None else self.min_crop_fraction
        if not 0 < lo <= self.crop_fraction <= 1:
            raise InvalidInputError("crop fractions must satisfy 0 < min <= max <= 1")
        if self.epochs < 0 or self.batch_size < 1:
            raise InvalidInputError("epochs must be >= 0 and batch_size >= 1")
        if not self.learning_rate > 0:
            raise InvalidInputError("learning rate must be positive")


def augment_batch(
    xb: np.ndarray,
    rng: np.random.Generator,
    crop_fraction: float,
    flip: bool,
    min_crop_fraction: Optional[float] = None,
) -> np.ndarray:
    """Random crop resized back, plus horizontal flip.

    The crop side is ``crop_fraction`` of the image side, or a uniform draw from
    ``[min_crop_fraction, crop_fraction]`` shared by the whole batch.
    """
    from .pixeltransforms import batch_crop_resize

    n, h, w, _ = xb.shape
    if min_crop_fraction is not None and min_crop_fraction < crop_fraction:
        crop_fraction = rng.uniform(min_crop_fraction, crop_fraction)
    side = max(1, int(round(crop_fraction * min(h, w))))
    oy = rng.integers(0, h - side + 1, size=n)
    ox = rng.integers(0, w - side + 1, size=n)
    flips = rng.random(n) < 0.5
    out = batch_crop_resize(xb, oy, ox, side) if side < min(h, w) else xb.copy()
    if flip:
        out[flips] = out[flips, :, ::-1]
    return out


def train(
    images: np.ndarray,
    labels: np.ndarray,
    cfg: TrainConfig,
    arch: Architecture = ARCH_A,
    transform: Optional[Callable[[np.ndarray, int], np.ndarray]] = None,
) -> SmallNet:
    """Mini-batch SGD with momentum on softmax cross-entropy.

    ``transform(batch, step)`` is applied to every augmented mini-batch; it is
    how transform-robust models are trained. Deterministic given ``cfg.seed``.
    """
    images = np.asarray(images, np.float32)
    labels = np.asarray(labels, np.int64)
    if images.ndim != 4 or images.shape[1:] != arch.input_shape:
        raise InvalidInputError(f"training images must be (N, {arch.input_shape}), got {images.shape}")
    if len(labels) != len(images) or np.any(labels < 0) or np.any(labels >= arch.num_classes):
        raise InvalidInputError("labels missing or out of range")

    root = SeedStream(cfg.seed)
    params = init_params(arch, root.child(1))
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    history = []
    lr, mom = np.float32(cfg.learning_rate), np.float32(cfg.momentum)
    step = 0
    for epoch in range(cfg.epochs):
        rng = root.child(2, epoch).generator()
        order = rng.permutation(len(images))
        total, count = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb = augment_batch(images[idx], rng, cfg.crop_fraction, cfg.flip, cfg.min_crop_fraction)
            if transform is not None:
                xb = np.asarray(transform(xb, step), np.float32)
            yb = labels[idx]
            logits, cache = _forward(params, arch, xb, np.float32)
            losses = cross_entropy(logits, yb)
            d = softmax(logits)
            d[np.arange(len(yb)), yb] -= 1.0
            d /= np.float32(len(yb))
            _, grads = _backward(cache, d.astype(np.float32), need_params=True, need_input=False)
            for k in params:
                velocity[k] = mom * velocity[k] - lr * grads[k].astype(np.float32)
                params[k] = params[k] + velocity[k]
            total += float(losses.sum())
            count += len(yb)
            step += 1
        history.append(total / count)
        log.info("epoch %d/%d loss %.4f", epoch + 1, cfg.epochs, history[-1])
    return SmallNet(arch, params, history=history)


def accuracy(model, images, labels) -> float:
    return float(np.mean(model.predict(images) == np.asarray(labels)))


# -- checkpoints ------------------------------------------------------------


def save_checkpoint(model: SmallNet, path) -> None:
    """Header (magic, version, arch JSON) then one named tensor section per parameter."""
    arch_blob = model.arch.to_json().encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(arch_blob)), arch_blob]
    tag = model.tag.encode()
    parts.append(struct.pack("<I", len(tag)) + tag)
    names = sorted(model.params)
    parts.append(struct.pack("<I", len(names)))
    for name in names:
        raw = name.encode()
        arr = np.asarray(model.params[name], np.float32)
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(tensor_bytes(arr.reshape(1, 1, -1)))
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> SmallNet:
    buf = Path(path).read_bytes()
    try:
        if buf[:4] != CHECKPOINT_MAGIC:
            raise FormatError(f"bad checkpoint magic {buf[:4]!r}")
        version, n_arch = struct.unpack_from("<II", buf, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointVersionError(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
        off = 12
        arch = Architecture.from_json(buf[off : off + n_arch].decode())
        off += n_arch
        (n_tag,) = struct.unpack_from("<I", buf, off)
        tag = buf[off + 4 : off + 4 + n_tag].decode()
        off += 4 + n_tag
        (n_sections,) = struct.unpack_from("<I", buf, off)
        off += 4
        shapes = arch.param_shapes()
        params = {}
        for _ in range(n_sections):
            (n_name,) = struct.unpack_from("<I", buf, off)
            name = buf[off + 4 : off + 4 + n_name].decode()
            off += 4 + n_name
            arr, off = parse_tensor(buf, off)
            if name not in shapes or arr.size != int(np.prod(shapes[name])):
                raise FormatError(f"unexpected section {name!r} with {arr.size} values")
            params[name] = arr.reshape(shapes[name]).copy()
    except struct.error as exc:
        raise FormatError(f"truncated checkpoint: {exc}") from None
    if set(params) != set(shapes):
        raise FormatError(f"missing sections: {sorted(set(shapes) - set(params))}")
    if off != len(buf):
        raise FormatError("trailing bytes after checkpoint")
    return SmallNet(arch, params, tag=tag)
