"""Small convolutional network in plain numpy.

Layout is NCHW internally; patches come in as ``(P, P, 3)`` or ``(B, P, P, 3)``.
The last parameterized layer may be a DropConnect fully-connected layer whose
weights are masked per example during training (inverted scaling, so inference
uses the plain weights). All parameters and activations are float64.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_ARCHITECTURE = "conv:16:5,relu,pool:2,conv:32:5,relu,pool:2,fc:64,relu,dcfc:2"
NODE_CLASS = 1

MODEL_MAGIC = b"RVCNN\x00"
MODEL_VERSION = 1


class DivergenceError(ArithmeticError):
    """Training produced a non-finite loss; lower the learning rate."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 30
    dropconnect_rate: float = 0.5
    weight_init_stddev: float | None = None  # None: sqrt(2 / fan_in) per layer
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 <= self.dropconnect_rate < 1:
            raise ValueError("dropconnect_rate must be in [0, 1)")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_init_stddev is not None and not self.weight_init_stddev > 0:
            raise ValueError("weight_init_stddev must be > 0 or None")


# --------------------------------------------------------------------------
# layers

class Conv:
    """Valid, stride-1 convolution."""

    def __init__(self, in_ch: int, filters: int, k: int):
        self.shape_w = (filters, in_ch, k, k)
        self.k = k
        self.W = np.zeros(self.shape_w)
        self.b = np.zeros(filters)

    def params(self):
        return [self.W, self.b]

    def out_shape(self, shape):
        c, h, w = shape
        return (self.shape_w[0], h - self.k + 1, w - self.k + 1)

    def forward(self, x, ctx):
        B, C, H, W_ = x.shape
        k = self.k
        win = sliding_window_view(x, (k, k), axis=(2, 3))  # B,C,Ho,Wo,k,k
        Ho, Wo = win.shape[2], win.shape[3]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * k * k)
        out = cols @ self.W.reshape(self.shape_w[0], -1).T + self.b
        ctx["cols"] = cols
        ctx["x_shape"] = x.shape
        return out.reshape(B, Ho, Wo, -1).transpose(0, 3, 1, 2)

    def backward(self, dout, ctx):
        B, C, H, W_ = ctx["x_shape"]
        F, _, k, _ = self.shape_w
        Ho, Wo = dout.shape[2], dout.shape[3]
        d = dout.transpose(0, 2, 3, 1).reshape(-1, F)
        dW = (d.T @ ctx["cols"]).reshape(self.shape_w)
        db = d.sum(axis=0)
        dcols = (d @ self.W.reshape(F, -1)).reshape(B, Ho, Wo, C, k, k)
        dx = np.zeros((B, C, H, W_))
        for i in range(k):
            for j in range(k):
                dx[:, :, i:i + Ho, j:j + Wo] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dx, [dW, db]


class ReLU:
    def params(self):
        return []

    def out_shape(self, shape):
        return shape

    def forward(self, x, ctx):
        ctx["mask"] = x > 0
        return np.where(ctx["mask"], x, 0.0)

    def backward(self, dout, ctx):
        return np.where(ctx["mask"], dout, 0.0), []


class MaxPool:
    """Non-overlapping ``s x s`` max pooling; trailing rows/cols that do not fill a window are dropped."""

    def __init__(self, size: int):
        self.s = size

    def params(self):
        return []

    def out_shape(self, shape):
        c, h, w = shape
        return (c, h // self.s, w // self.s)

    def forward(self, x, ctx):
        B, C, H, W = x.shape
        s = self.s
        Ho, Wo = H // s, W // s
        xc = x[:, :, :Ho * s, :Wo * s]
        blocks = xc.reshape(B, C, Ho, s, Wo, s).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho, Wo, s * s)
        arg = blocks.argmax(axis=-1)
        ctx["arg"] = arg
        ctx["x_shape"] = x.shape
        return np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(self, dout, ctx):
        B, C, H, W = ctx["x_shape"]
        s = self.s
        Ho, Wo = dout.shape[2], dout.shape[3]
        blocks = np.zeros((B, C, Ho, Wo, s * s))
        # only the first argmax of each window receives gradient
        np.put_along_axis(blocks, ctx["arg"][..., None], dout[..., None], axis=-1)
        dx = np.zeros((B, C, H, W))
        dx[:, :, :Ho * s, :Wo * s] = (
            blocks.reshape(B, C, Ho, Wo, s, s).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho * s, Wo * s)
        )
        return dx, []


class Dense:
    """Fully-connected layer on flattened input; weights stored ``(in, out)``."""

    dropconnect = False

    def __init__(self, n_in: int, n_out: int):
        self.W = np.zeros((n_in, n_out))
        self.b = np.zeros(n_out)

    def params(self):
        return [self.W, self.b]

    def out_shape(self, shape):
        return (self.W.shape[1],)

    def forward(self, x, ctx):
        ctx["x_shape"] = x.shape
        xf = x.reshape(x.shape[0], -1)
        ctx["x"] = xf
        return xf @ self.W + self.b

    def backward(self, dout, ctx):
        xf = ctx["x"]
        dx = (dout @ self.W.T).reshape(ctx["x_shape"])
        return dx, [xf.T @ dout, dout.sum(axis=0)]


class DropConnectDense(Dense):
    """Dense layer with a per-example Bernoulli weight mask at train time.

    ``ctx["mask"]`` holds the scaled mask ``(B, in, out)``: kept weights get
    ``1 / (1 - rate)`` and dropped ones 0. With no mask the layer is plain Dense.
    """

    dropconnect = True

    def forward(self, x, ctx):
        mask = ctx.get("mask")
        if mask is None:
            return super().forward(x, ctx)
        ctx["x_shape"] = x.shape
        xf = x.reshape(x.shape[0], -1)
        ctx["x"] = xf
        return np.einsum("bi,bio->bo", xf, self.W * mask) + self.b

    def backward(self, dout, ctx):
        mask = ctx.get("mask")
        if mask is None:
            return super().backward(dout, ctx)
        xf = ctx["x"]
        dx = np.einsum("bo,bio->bi", dout, self.W * mask).reshape(ctx["x_shape"])
        dW = np.einsum("bi,bo,bio->io", xf, dout, mask)
        return dx, [dW, dout.sum(axis=0)]


def parse_architecture(spec: str) -> list[tuple]:
    """``"conv:16:5,relu,pool:2,fc:64,dcfc:2"`` -> ``[("conv", 16, 5), ("relu",), ...]``."""
    layers = []
    for token in spec.replace(" ", "").split(","):
        if not token:
            continue
        name, *args = token.split(":")
        try:
            nums = tuple(int(a) for a in args)
        except ValueError:
            raise ValueError(f"bad layer token {token!r}") from None
        arity = {"conv": 2, "relu": 0, "pool": 1, "fc": 1, "dcfc": 1}
        if name not in arity or len(nums) != arity[name] or any(n < 1 for n in nums):
            raise ValueError(f"bad layer token {token!r}")
        layers.append((name, *nums))
    return layers


# --------------------------------------------------------------------------
# model

class CnnModel:
    def __init__(self, architecture: str = DEFAULT_ARCHITECTURE, input_shape=(3, 32, 32)):
        self.architecture = architecture
        self.input_shape = tuple(int(d) for d in input_shape)
        self.layers = []
        shape = self.input_shape
        for spec in parse_architecture(architecture):
            kind = spec[0]
            if kind == "conv":
                layer = Conv(shape[0], spec[1], spec[2])
            elif kind == "relu":
                layer = ReLU()
            elif kind == "pool":
                layer = MaxPool(spec[1])
            else:
                n_in = int(np.prod(shape))
                layer = (DropConnectDense if kind == "dcfc" else Dense)(n_in, spec[1])
            shape = layer.out_shape(shape)
            if min(shape) < 1:
                raise ValueError(f"architecture {architecture!r} collapses input {input_shape} to {shape}")
            self.layers.append(layer)
        if shape != (2,):
            raise ValueError(f"architecture must end in 2 logits, got output shape {shape}")
        n_dc = sum(getattr(l, "dropconnect", False) for l in self.layers)
        if n_dc > 1:
            raise ValueError("at most one DropConnect layer is supported")

    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params()]

    @property
    def dropconnect_layer(self):
        for layer in self.layers:
            if getattr(layer, "dropconnect", False):
                return layer
        return None

    def copy(self) -> "CnnModel":
        other = CnnModel(self.architecture, self.input_shape)
        for dst, src in zip(other.params(), self.params()):
            dst[...] = src
        return other

    def init_weights(self, stddev: float | None, rng: np.random.Generator) -> "CnnModel":
        """Zero-mean Gaussian weights, zero biases.

        ``stddev=None`` scales each layer by ``sqrt(2 / fan_in)``.
        """
        for layer in self.layers:
            if isinstance(layer, (Conv, Dense)):
                fan_in = layer.W[0].size if isinstance(layer, Conv) else layer.W.shape[0]
                sd = math.sqrt(2.0 / fan_in) if stddev is None else stddev
                layer.W[...] = rng.normal(0.0, sd, layer.W.shape)
                layer.b[...] = 0.0
        return self

    def draw_masks(self, batch: int, rate: float, rng: np.random.Generator):
        """Scaled DropConnect masks ``(batch, in, out)``; ``None`` when there is nothing to mask."""
        layer = self.dropconnect_layer
        if layer is None:
            return None
        keep = 1.0 - rate
        return (rng.random((batch,) + layer.W.shape) < keep) / keep

    # batched primitives ---------------------------------------------------

    def _as_batch(self, patches) -> np.ndarray:
        x = np.asarray(patches, dtype=np.float64)
        if x.ndim == 3:
            x = x[None]
        c, h, w = self.input_shape
        if x.ndim != 4 or x.shape[1:] != (h, w, c):
            raise ValueError(f"expected patches of shape (..., {h}, {w}, {c}), got {x.shape}")
        return x.transpose(0, 3, 1, 2)

    def logits(self, patches, masks=None):
        x = self._as_batch(patches)
        ctxs = []
        for layer in self.layers:
            ctx = {}
            if getattr(layer, "dropconnect", False) and masks is not None:
                ctx["mask"] = masks
            x = layer.forward(x, ctx)
            ctxs.append(ctx)
        return x, ctxs

    def probabilities(self, patches, masks=None) -> np.ndarray:
        z, _ = self.logits(patches, masks)
        return softmax(z)

    def loss_and_grads(self, patches, labels, masks=None):
        """Mean cross-entropy over the batch and its gradient per parameter (declaration order)."""
        z, ctxs = self.logits(patches, masks)
        p = softmax(z)
        y = np.asarray(labels, dtype=np.intp).reshape(-1)
        B = p.shape[0]
        if y.shape[0] != B:
            raise ValueError(f"{y.shape[0]} labels for {B} patches")
        zmax = z.max(axis=1)
        log_norm = zmax + np.log(np.exp(z - zmax[:, None]).sum(axis=1))
        loss = float(np.mean(log_norm - z[np.arange(B), y]))
        d = p.copy()
        d[np.arange(B), y] -= 1.0
        d /= B
        grads_rev = []
        for layer, ctx in zip(reversed(self.layers), reversed(ctxs)):
            d, g = layer.backward(d, ctx)
            grads_rev.append(g)
        grads = [g for gs in reversed(grads_rev) for g in gs]
        return loss, grads, p

    # single-patch contract ------------------------------------------------

    def forward(self, patch, mode: str = "inference", rng: np.random.Generator | None = None,
                rate: float = 0.5) -> np.ndarray:
        """Two-class probabilities for one patch.

        ``mode="train"`` draws a fresh DropConnect mask from ``rng``.
        """
        if mode == "inference":
            return self.probabilities(patch)[0]
        if mode != "train":
            raise ValueError(f"unknown mode {mode!r}")
        if rng is None:
            raise ValueError("train mode needs an rng for the DropConnect mask")
        return self.probabilities(patch, self.draw_masks(1, rate, rng))[0]

    def backward(self, patch, label: int, masks=None):
        """Cross-entropy ``-log p[label]`` and parameter gradients for one patch under a fixed mask."""
        loss, grads, _ = self.loss_and_grads(patch, [label], masks)
        return grads, loss

    def predict(self, patch) -> float:
        return float(self.forward(patch)[NODE_CLASS])

    def predict_batch(self, patches, batch_size: int = 256) -> np.ndarray:
        x = np.asarray(patches, dtype=np.float64)
        out = [self.probabilities(x[i:i + batch_size])[:, NODE_CLASS] for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros(0)

    # serialization ----------------------------------------------------------

    def to_bytes(self) -> bytes:
        arch = self.architecture.encode()
        parts = [MODEL_MAGIC, struct.pack("<I", MODEL_VERSION),
                 struct.pack("<I", len(arch)), arch,
                 struct.pack("<3I", *self.input_shape)]
        params = self.params()
        parts.append(struct.pack("<I", len(params)))
        for p in params:
            parts.append(struct.pack("<I", p.ndim) + struct.pack(f"<{p.ndim}I", *p.shape))
            parts.append(p.astype("<f8").tobytes())
        body = b"".join(parts)
        return body + hashlib.sha256(body).digest()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "CnnModel":
        if len(blob) < 32 or hashlib.sha256(blob[:-32]).digest() != blob[-32:]:
            raise ValueError("model file checksum mismatch")
        if not blob.startswith(MODEL_MAGIC):
            raise ValueError("not a model file")
        pos = len(MODEL_MAGIC)

        def take(fmt):
            nonlocal pos
            vals = struct.unpack_from(fmt, blob, pos)
            pos += struct.calcsize(fmt)
            return vals

        (version,) = take("<I")
        if version != MODEL_VERSION:
            raise ValueError(f"unsupported model version {version}")
        (n,) = take("<I")
        arch = blob[pos:pos + n].decode()
        pos += n
        model = cls(arch, take("<3I"))
        (count,) = take("<I")
        params = model.params()
        if count != len(params):
            raise ValueError("parameter count does not match architecture")
        for p in params:
            (ndim,) = take("<I")
            shape = take(f"<{ndim}I")
            if tuple(shape) != p.shape:
                raise ValueError(f"parameter shape {shape} does not match {p.shape}")
            size = p.size * 8
            p[...] = np.frombuffer(blob, dtype="<f8", count=p.size, offset=pos).reshape(p.shape)
            pos += size
        if not all(np.isfinite(p).all() for p in params):
            raise ValueError("model contains non-finite parameters")
        return model

    def save(self, path) -> str:
        blob = self.to_bytes()
        with open(path, "wb") as fh:
            fh.write(blob)
        return blob[-32:].hex()

    @classmethod
    def load(cls, path) -> "CnnModel":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    def checksum(self) -> str:
        return self.to_bytes()[-32:].hex()


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# --------------------------------------------------------------------------
# training

@dataclass
class TrainResult:
    model: CnnModel
    history: list[tuple[int, float, float]] = field(default_factory=list)

    def log_csv(self) -> str:
        rows = ["epoch,mean_loss,train_accuracy"]
        rows += [f"{e},{loss:.10g},{acc:.10g}" for e, loss, acc in self.history]
        return "\n".join(rows) + "\n"


def train(patches, labels, config: TrainConfig = TrainConfig(), architecture: str = DEFAULT_ARCHITECTURE,
          progress=None) -> TrainResult:
    """Minibatch SGD with momentum; every source of randomness comes from ``config.seed``.

    ``progress``, if given, is called as ``progress(epoch, mean_loss, accuracy)``.
    """
    x = np.asarray(patches)  # cast per minibatch; float32 datasets stay float32 in memory
    y = np.asarray(labels, dtype=np.intp).reshape(-1)
    if x.ndim != 4 or x.shape[0] != y.shape[0]:
        raise ValueError(f"need (n, P, P, C) patches with n labels, got {x.shape} and {y.shape}")
    if set(np.unique(y).tolist()) != {0, 1}:
        raise ValueError("training data must contain both classes")
    rng = np.random.default_rng(config.seed)
    model = CnnModel(architecture, (x.shape[3], x.shape[1], x.shape[2]))
    model.init_weights(config.weight_init_stddev, rng)
    params = model.params()
    velocity = [np.zeros_like(p) for p in params]
    n = len(y)
    result = TrainResult(model)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        total_loss = 0.0
        correct = 0
        for start in range(0, n, config.batch_size):
            batch = np.sort(order[start:start + config.batch_size])
            masks = model.draw_masks(len(batch), config.dropconnect_rate, rng)
            loss, grads, p = model.loss_and_grads(x[batch], y[batch], masks)
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}")
            total_loss += loss * len(batch)
            correct += int(np.sum(p.argmax(axis=1) == y[batch]))
            for param, vel, grad in zip(params, velocity, grads):
                vel *= config.momentum
                vel -= config.learning_rate * grad
                param += vel
        row = (epoch, total_loss / n, correct / n)
        result.history.append(row)
        if progress is not None:
            progress(*row)
    if not all(np.isfinite(p).all() for p in params):
        raise DivergenceError("non-finite parameters after training")
    return result
