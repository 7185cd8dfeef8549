"""Small feed-forward networks with hand-written reverse mode.

Supported layers: ``dense``, ``conv3x3`` (padding 1), ``relu``,
``maxpool2x2`` and ``flatten``.  A :class:`Network` bundles a
:class:`NetworkDef` with its :class:`ModelParams` and exposes logits, input
gradients and parameter gradients for whole batches.
"""

import json
import logging
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, FormatError, NonFiniteError, ShapeError
from .tensor_core import DTYPE, softmax_ce_batch

log = logging.getLogger(__name__)

LAYER_KINDS = ("dense", "conv3x3", "relu", "maxpool2x2", "flatten")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    n_in: int = 0
    n_out: int = 0
    stride: int = 1

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")

    @property
    def has_params(self):
        return self.kind in ("dense", "conv3x3")

    def to_dict(self):
        return {"kind": self.kind, "n_in": self.n_in, "n_out": self.n_out, "stride": self.stride}


def dense(n_in, n_out):
    return LayerSpec("dense", n_in, n_out)


def conv3x3(in_ch, out_ch, stride=1):
    return LayerSpec("conv3x3", in_ch, out_ch, stride)


def relu():
    return LayerSpec("relu")


def maxpool2x2():
    return LayerSpec("maxpool2x2")


def flatten():
    return LayerSpec("flatten")


@dataclass(frozen=True)
class NetworkDef:
    layers: tuple
    input_shape: tuple
    class_count: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if self.class_count < 2:
            raise ConfigError("class_count must be >= 2")
        shapes = self.layer_shapes()
        if shapes[-1] != (self.class_count,):
            raise ShapeError(f"network output {shapes[-1]} != ({self.class_count},)")

    def layer_shapes(self):
        """Per-sample output shape after each layer (index 0 is the input)."""
        shape = self.input_shape
        out = [shape]
        for i, layer in enumerate(self.layers):
            if layer.kind == "dense":
                size = int(np.prod(shape))
                if size != layer.n_in:
                    raise ShapeError(f"layer {i}: dense expects {layer.n_in} inputs, got {size}")
                shape = (layer.n_out,)
            elif layer.kind == "conv3x3":
                if len(shape) != 3 or shape[0] != layer.n_in:
                    raise ShapeError(f"layer {i}: conv3x3 expects ({layer.n_in}, H, W), got {shape}")
                s = layer.stride
                shape = (layer.n_out, (shape[1] - 1) // s + 1, (shape[2] - 1) // s + 1)
            elif layer.kind == "maxpool2x2":
                if len(shape) != 3 or shape[1] % 2 or shape[2] % 2:
                    raise ShapeError(f"layer {i}: maxpool2x2 needs even H, W, got {shape}")
                shape = (shape[0], shape[1] // 2, shape[2] // 2)
            elif layer.kind == "flatten":
                shape = (int(np.prod(shape)),)
            out.append(shape)
        return out

    def param_shapes(self):
        shapes = []
        for layer in self.layers:
            if layer.kind == "dense":
                shapes += [(layer.n_out, layer.n_in), (layer.n_out,)]
            elif layer.kind == "conv3x3":
                shapes += [(layer.n_out, layer.n_in, 3, 3), (layer.n_out,)]
        return shapes

    def to_dict(self):
        return {
            "layers": [l.to_dict() for l in self.layers],
            "input_shape": list(self.input_shape),
            "class_count": self.class_count,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(LayerSpec(**l) for l in d["layers"]), tuple(d["input_shape"]), d["class_count"])


def desk_cnn(input_shape=(1, 16, 16), class_count=10, channels=8):
    """Reference desk topology: conv3x3 -> relu -> maxpool -> flatten -> dense."""
    c, h, w = input_shape
    return NetworkDef(
        (conv3x3(c, channels), relu(), maxpool2x2(), flatten(),
         dense(channels * (h // 2) * (w // 2), class_count)),
        input_shape,
        class_count,
    )


@dataclass
class ModelParams:
    """Weights and biases in layer order, plus training metadata."""

    tensors: list
    meta: dict = field(default_factory=dict)

    def astype(self, dtype):
        return ModelParams([t.astype(dtype) for t in self.tensors], dict(self.meta))

    def copy(self):
        return ModelParams([t.copy() for t in self.tensors], dict(self.meta))

    def check(self, netdef):
        expected = netdef.param_shapes()
        if len(expected) != len(self.tensors):
            raise ShapeError(f"expected {len(expected)} tensors, got {len(self.tensors)}")
        for i, (shape, t) in enumerate(zip(expected, self.tensors)):
            if tuple(t.shape) != tuple(shape):
                raise ShapeError(f"tensor {i}: shape {t.shape} != {shape}")
            if not np.all(np.isfinite(t)):
                raise NonFiniteError(f"tensor {i} has non-finite values")


def init_params(netdef, seed, dtype=DTYPE):
    """Kaiming-uniform weights (fan-in), zero biases."""
    rng = np.random.default_rng([seed, 0])
    tensors = []
    for shape in netdef.param_shapes():
        if len(shape) == 1:
            tensors.append(np.zeros(shape, dtype=dtype))
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            tensors.append(rng.uniform(-bound, bound, size=shape).astype(dtype))
    return ModelParams(tensors, {"mode": "init", "seed": int(seed), "epochs": 0})


# -- layer kernels ---------------------------------------------------------


def _conv_forward(x, w, b, stride):
    bsz, c, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(bsz * ho * wo, c * 9)
    out = cols @ w.reshape(w.shape[0], -1).T + b
    return out.reshape(bsz, ho, wo, -1).transpose(0, 3, 1, 2), cols


def _conv_backward(dout, x_shape, cols, w, stride):
    bsz, c, h, wd = x_shape
    o = w.shape[0]
    ho, wo = dout.shape[2], dout.shape[3]
    d = dout.transpose(0, 2, 3, 1).reshape(-1, o)
    dw = (d.T @ cols).reshape(w.shape)
    db = d.sum(axis=0)
    dcols = (d @ w.reshape(o, -1)).reshape(bsz, ho, wo, c, 3, 3)
    dxp = np.zeros((bsz, c, h + 2, wd + 2), dtype=dout.dtype)
    span_h = stride * (ho - 1) + 1
    span_w = stride * (wo - 1) + 1
    for i in range(3):
        for j in range(3):
            dxp[:, :, i:i + span_h:stride, j:j + span_w:stride] += dcols[..., i, j].transpose(0, 3, 1, 2)
    return dxp[:, :, 1:-1, 1:-1], dw, db


def _pool_forward(x):
    bsz, c, h, w = x.shape
    blocks = x.reshape(bsz, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(bsz, c, h // 2, w // 2, 4)
    idx = np.argmax(blocks, axis=-1)[..., None]
    return np.take_along_axis(blocks, idx, axis=-1)[..., 0], idx


def _pool_backward(dout, x_shape, idx):
    bsz, c, h, w = x_shape
    grad = np.zeros(dout.shape + (4,), dtype=dout.dtype)
    np.put_along_axis(grad, idx, dout[..., None], axis=-1)
    grad = grad.reshape(bsz, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return grad.reshape(x_shape)


class Network:
    """A NetworkDef with frozen parameters.

    Read-only after construction, so one instance may be shared across
    threads.  All methods accept a single image ``(C, H, W)`` or a batch
    ``(B, C, H, W)``.
    """

    def __init__(self, netdef, params):
        params.check(netdef)
        self.netdef = netdef
        self.params = params
        self.dtype = params.tensors[0].dtype if params.tensors else DTYPE

    @property
    def class_count(self):
        return self.netdef.class_count

    def astype(self, dtype):
        return Network(self.netdef, self.params.astype(dtype))

    def _batch(self, x):
        x = np.asarray(x, dtype=self.dtype)
        single = x.shape == self.netdef.input_shape
        if single:
            x = x[None]
        if x.shape[1:] != self.netdef.input_shape:
            raise ShapeError(f"input shape {x.shape[1:]} != {self.netdef.input_shape}")
        return x, single

    def _forward(self, x, record=None):
        caches = []
        p = 0
        for layer in self.netdef.layers:
            if record is not None and caches:
                record.append(x)
            if layer.kind == "dense":
                w, b = self.params.tensors[p], self.params.tensors[p + 1]
                p += 2
                x2 = x.reshape(x.shape[0], -1)
                caches.append((x.shape, x2))
                x = x2 @ w.T + b
            elif layer.kind == "conv3x3":
                w, b = self.params.tensors[p], self.params.tensors[p + 1]
                p += 2
                shape = x.shape
                x, cols = _conv_forward(x, w, b, layer.stride)
                caches.append((shape, cols))
            elif layer.kind == "relu":
                caches.append(x > 0)
                x = np.maximum(x, 0)
            elif layer.kind == "maxpool2x2":
                shape = x.shape
                x, idx = _pool_forward(x)
                caches.append((shape, idx))
            else:
                caches.append(x.shape)
                x = x.reshape(x.shape[0], -1)
        if record is not None:
            record.append(x)
        return x, caches

    def _backward(self, dlogits, caches, want_params):
        grads = [None] * len(self.params.tensors)
        p = len(self.params.tensors)
        d = dlogits
        for layer, cache in zip(reversed(self.netdef.layers), reversed(caches)):
            if layer.kind == "dense":
                p -= 2
                w = self.params.tensors[p]
                shape, x2 = cache
                if want_params:
                    grads[p] = d.T @ x2
                    grads[p + 1] = d.sum(axis=0)
                d = (d @ w).reshape(shape)
            elif layer.kind == "conv3x3":
                p -= 2
                shape, cols = cache
                d, dw, db = _conv_backward(d, shape, cols, self.params.tensors[p], layer.stride)
                if want_params:
                    grads[p], grads[p + 1] = dw, db
            elif layer.kind == "relu":
                d = d * cache
            elif layer.kind == "maxpool2x2":
                shape, idx = cache
                d = _pool_backward(d, shape, idx)
            else:
                d = d.reshape(cache)
        return d, grads

    def trace(self, x):
        """Outputs of every layer for a batch (index 0 is the input)."""
        xb, _ = self._batch(x)
        outs = [xb]
        self._forward(xb, record=outs)
        return outs

    def logits(self, x):
        xb, single = self._batch(x)
        out, _ = self._forward(xb)
        return out[0] if single else out

    def predict(self, x):
        out = np.atleast_2d(self.logits(x))
        # argmax returns the first maximal index, i.e. ties -> lowest class
        pred = np.argmax(out, axis=1)
        return pred[0] if np.ndim(x) == len(self.netdef.input_shape) else pred

    def loss(self, x, y):
        xb, single = self._batch(x)
        yb = np.atleast_1d(np.asarray(y, dtype=np.int64))
        losses, _ = softmax_ce_batch(self._forward(xb)[0], yb)
        return losses[0] if single else losses

    def loss_and_grad(self, x, y):
        """Per-sample CE losses and the gradient of each sample's loss w.r.t. its input."""
        xb, single = self._batch(x)
        yb = np.atleast_1d(np.asarray(y, dtype=np.int64))
        if yb.shape[0] != xb.shape[0]:
            raise ShapeError("need one label per input")
        out, caches = self._forward(xb)
        losses, probs = softmax_ce_batch(out, yb)
        if not np.all(np.isfinite(losses)):
            raise NonFiniteError("non-finite loss")
        dlogits = probs.astype(self.dtype)
        dlogits[np.arange(len(yb)), yb] -= 1
        dx, _ = self._backward(dlogits, caches, want_params=False)
        if single:
            return losses[0], dx[0]
        return losses, dx

    def param_grads(self, x, y):
        """Mean CE over the batch and its gradient for every tensor in ``params``."""
        xb, _ = self._batch(x)
        yb = np.atleast_1d(np.asarray(y, dtype=np.int64))
        if xb.shape[0] == 0:
            raise ValueError("empty batch")
        if yb.shape[0] != xb.shape[0]:
            raise ShapeError("need one label per input")
        out, caches = self._forward(xb)
        losses, probs = softmax_ce_batch(out, yb)
        dlogits = probs.astype(self.dtype)
        dlogits[np.arange(len(yb)), yb] -= 1
        dlogits /= len(yb)
        _, grads = self._backward(dlogits, caches, want_params=True)
        return float(np.mean(losses)), grads


def forward(netdef, params, x):
    return Network(netdef, params).logits(x)


def input_gradient(netdef, params, x, y):
    return Network(netdef, params).loss_and_grad(x, y)[1]


def param_gradient(netdef, params, batch):
    """Mean-CE gradients for ``batch = (images, labels)``."""
    images, labels = batch
    if len(images) == 0:
        raise ValueError("empty batch")
    return Network(netdef, params).param_grads(images, labels)[1]


# -- training --------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 8
    batch_size: int = 32
    lr: float = 0.05
    seed: int = 0
    mode: str = "standard"
    # inner PGD for adversarial training; unused in standard mode
    adv_eps: float = 8 / 255
    adv_alpha: float = 2 / 255
    adv_iters: int = 7

    def __post_init__(self):
        if self.mode not in ("standard", "adversarial"):
            raise ConfigError(f"mode must be standard|adversarial, got {self.mode!r}")
        if self.epochs < 0 or self.batch_size < 1 or not self.lr > 0:
            raise ConfigError("epochs >= 0, batch_size >= 1 and lr > 0 required")
        if self.mode == "adversarial" and (self.adv_eps < 0 or not self.adv_alpha > 0 or self.adv_iters < 1):
            raise ConfigError("adversarial training needs adv_eps >= 0, adv_alpha > 0, adv_iters >= 1")


def _train(netdef, images, labels, cfg, adversarial):
    from .attacks import AttackBudget, pgd_attack

    images = np.asarray(images, dtype=DTYPE)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0 or len(images) != len(labels):
        raise ValueError("need a non-empty labelled dataset")
    params = init_params(netdef, cfg.seed)
    shuffle_rng = np.random.default_rng([cfg.seed, 1])
    attack_rng = np.random.default_rng([cfg.seed, 2])
    n = len(images)
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb, yb = images[idx], labels[idx]
            if adversarial and cfg.adv_eps > 0:
                budget = AttackBudget(
                    norm="linf", eps=cfg.adv_eps, alpha=cfg.adv_alpha, iters=cfg.adv_iters,
                    restarts=1, seed=int(attack_rng.integers(2**31)),
                )
                xb = pgd_attack(Network(netdef, params), xb, yb, budget)
            loss, grads = Network(netdef, params).param_grads(xb, yb)
            if not np.isfinite(loss):
                raise NonFiniteError(f"training diverged at epoch {epoch}")
            for t, g in zip(params.tensors, grads):
                t -= (cfg.lr * g).astype(t.dtype)
            total += loss * len(idx)
        log.debug("epoch %d mean loss %.4f", epoch, total / n)
    acc = float(np.mean(Network(netdef, params).predict(images) == labels))
    params.meta = {
        "mode": "adversarial" if adversarial else "standard",
        "seed": int(cfg.seed),
        "epochs": int(cfg.epochs),
        "train_accuracy": acc,
    }
    return params


def train_standard(netdef, data, cfg):
    """Plain minibatch SGD on ``data = (images, labels)``."""
    if cfg.mode != "standard":
        raise ConfigError("train_standard needs mode='standard'")
    return _train(netdef, data[0], data[1], cfg, adversarial=False)


def train_adversarial(netdef, data, cfg):
    """SGD where each minibatch is replaced by its PGD counterpart under the current weights."""
    if cfg.mode != "adversarial":
        raise ConfigError("train_adversarial needs mode='adversarial'")
    return _train(netdef, data[0], data[1], cfg, adversarial=True)


def train(netdef, data, cfg):
    if cfg.mode == "adversarial":
        return train_adversarial(netdef, data, cfg)
    return train_standard(netdef, data, cfg)


# -- weight file -----------------------------------------------------------
#
# "PKW1" | u32 entry count | entries | u32 crc32(all payloads)
# entry: u8 kind | u32 rank | u32 dims[rank] | payload
# kinds 1/2 dense weight/bias, 3/4 conv weight/bias (f32 LE payload),
# 255 metadata (UTF-8 JSON payload, rank 1, dim = byte length).

MAGIC = b"PKW1"
_META_KIND = 255


def _tensor_kinds(netdef):
    kinds = []
    for layer in netdef.layers:
        if layer.kind == "dense":
            kinds += [1, 2]
        elif layer.kind == "conv3x3":
            kinds += [3, 4]
    return kinds


def weights_bytes(params, netdef=None):
    kinds = _tensor_kinds(netdef) if netdef is not None else [0] * len(params.tensors)
    entries = []
    for kind, t in zip(kinds, params.tensors):
        entries.append((kind, t.shape, np.ascontiguousarray(t, dtype="<f4").tobytes()))
    if params.meta:
        blob = json.dumps(params.meta, sort_keys=True).encode()
        entries.append((_META_KIND, (len(blob),), blob))
    out = [MAGIC, struct.pack("<I", len(entries))]
    crc = 0
    for kind, shape, payload in entries:
        out.append(struct.pack("<BI", kind, len(shape)))
        out.append(struct.pack(f"<{len(shape)}I", *shape))
        out.append(payload)
        crc = zlib.crc32(payload, crc)
    out.append(struct.pack("<I", crc))
    return b"".join(out)


def atomic_write(path, data):
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_weights(params, path, netdef=None):
    atomic_write(path, weights_bytes(params, netdef))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise FormatError("weight file truncated")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def parse_weights(data, netdef):
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise FormatError("bad magic; not a PKW1 weight file")
    (count,) = r.unpack("<I")
    tensors, meta, crc = [], {}, 0
    for _ in range(count):
        kind, rank = r.unpack("<BI")
        if rank > 8:
            raise FormatError(f"implausible tensor rank {rank}")
        dims = r.unpack(f"<{rank}I")
        if kind == _META_KIND:
            payload = r.take(dims[0])
            meta = json.loads(payload.decode())
        else:
            payload = r.take(4 * int(np.prod(dims, dtype=np.int64)))
            tensors.append(np.frombuffer(payload, dtype="<f4").reshape(dims).astype(DTYPE))
        crc = zlib.crc32(payload, crc)
    (stored,) = r.unpack("<I")
    if stored != crc:
        raise FormatError("weight file checksum mismatch")
    if r.pos != len(data):
        raise FormatError("trailing bytes after checksum")
    params = ModelParams(tensors, meta)
    params.check(netdef)
    return params


def load_weights(netdef, path):
    with open(path, "rb") as f:
        return parse_weights(f.read(), netdef)


def with_meta(params, **kw):
    return replace(params, meta={**params.meta, **kw})
