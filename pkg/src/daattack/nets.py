"""Small image classifiers with explicit forward and backward passes.

Layers: conv (same-size, odd kernel, zero pad), dense, relu, flatten.
Everything is float64 and row-independent: each example's logits and input
gradient depend only on that example, so batching is purely a throughput
choice and never changes values.

The forward/backward passes route through the kernels module, so they run on
whichever backend (numba or numpy) was selected at import.
"""

import struct
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import (
    BadMagicError,
    ConfigError,
    FormatVersionError,
    ShapeError,
    TrainingError,
    TruncatedFileError,
)
from .ops import clip_ball_and_range, sign, softmax
from .rng import RngStream

_MAGIC = b"DAKM"
_VERSION = 1
_KIND_CODES = {"conv": 0, "dense": 1, "relu": 2, "flatten": 3}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}


@dataclass(frozen=True)
class LayerSpec:
    """One layer: kind in {conv, dense, relu, flatten}; out is conv channels
    or dense features; k is the conv kernel size (odd)."""

    kind: str
    out: int = 0
    k: int = 0


def conv(out, k):
    return LayerSpec("conv", out=out, k=k)


def dense(out):
    return LayerSpec("dense", out=out)


def relu():
    return LayerSpec("relu")


def flatten():
    return LayerSpec("flatten")


def _propagate_shapes(specs, input_shape, n_classes):
    """Shape-check the stack and return the input shape of every layer."""
    shape = tuple(input_shape)
    if len(shape) != 3:
        raise ConfigError(f"input shape must be (C,H,W), got {shape}")
    in_shapes = []
    for i, spec in enumerate(specs):
        in_shapes.append(shape)
        if spec.kind == "conv":
            if len(shape) != 3:
                raise ConfigError(f"layer {i}: conv needs a (C,H,W) input, got {shape}")
            c, h, w = shape
            if spec.k % 2 == 0 or spec.k < 1:
                raise ConfigError(f"layer {i}: conv kernel must be odd, got {spec.k}")
            if spec.k > min(h, w):
                raise ConfigError(
                    f"layer {i}: kernel {spec.k} exceeds input {h}x{w}"
                )
            if spec.out < 1:
                raise ConfigError(f"layer {i}: conv needs out >= 1")
            shape = (spec.out, h, w)
        elif spec.kind == "relu":
            pass
        elif spec.kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif spec.kind == "dense":
            if len(shape) != 1:
                raise ConfigError(
                    f"layer {i}: dense needs a flat input, got {shape}"
                )
            if spec.out < 1:
                raise ConfigError(f"layer {i}: dense needs out >= 1")
            shape = (spec.out,)
        else:
            raise ConfigError(f"layer {i}: unknown layer kind {spec.kind!r}")
    if shape != (n_classes,):
        raise ConfigError(
            f"stack produces {shape}, expected ({n_classes},) logits"
        )
    return in_shapes


@dataclass(frozen=True)
class TrainMeta:
    """Provenance of a trained model, persisted in the model file."""

    mode: str = "normal"  # normal | adversarial
    eps_train: float = 0.0
    steps_train: int = 0
    seed: int = 0


class Classifier:
    """A trained (or freshly initialized) feed-forward classifier."""

    def __init__(self, specs, input_shape, n_classes, params, meta=TrainMeta()):
        self.specs = tuple(specs)
        self.input_shape = tuple(input_shape)
        self.n_classes = int(n_classes)
        self.in_shapes = _propagate_shapes(self.specs, self.input_shape, self.n_classes)
        self.params = params
        self.meta = meta

    @classmethod
    def initialize(cls, specs, input_shape, n_classes, rng, meta=TrainMeta()):
        """He-style init: weights ~ N(0, sqrt(2/fan_in)), biases zero."""
        in_shapes = _propagate_shapes(tuple(specs), tuple(input_shape), n_classes)
        params = []
        for spec, in_shape in zip(specs, in_shapes):
            if spec.kind == "conv":
                c_in = in_shape[0]
                std = np.sqrt(2.0 / (c_in * spec.k * spec.k))
                w = rng.normal(std, (spec.out, c_in, spec.k, spec.k))
                params.append((w, np.zeros(spec.out)))
            elif spec.kind == "dense":
                d_in = in_shape[0]
                std = np.sqrt(2.0 / d_in)
                w = rng.normal(std, (spec.out, d_in))
                params.append((w, np.zeros(spec.out)))
            else:
                params.append(None)
        return cls(specs, input_shape, n_classes, params, meta)

    # -- forward / backward ------------------------------------------------

    def _check_batch(self, x):
        x = np.ascontiguousarray(x, dtype=np.float64)
        if x.ndim == 3:
            x = x[None]
            single = True
        elif x.ndim == 4:
            single = False
        else:
            raise ShapeError(f"expected [C,H,W] or [B,C,H,W], got {x.shape}")
        if x.shape[1:] != self.input_shape:
            raise ShapeError(
                f"input shape {x.shape[1:]} does not match model {self.input_shape}"
            )
        return x, single

    def _forward(self, x):
        """x: [B,C,H,W] contiguous. Returns (logits [B,K], caches)."""
        caches = []
        cur = x
        for spec, p in zip(self.specs, self.params):
            if spec.kind == "conv":
                caches.append(cur)
                cur = kernels.conv2d_fwd(cur, p[0], p[1])
            elif spec.kind == "relu":
                mask = cur > 0.0
                caches.append(mask)
                cur = cur * mask
            elif spec.kind == "flatten":
                caches.append(cur.shape)
                cur = np.ascontiguousarray(cur.reshape(cur.shape[0], -1))
            elif spec.kind == "dense":
                caches.append(cur)
                cur = kernels.dense_fwd(cur, p[0], p[1])
        return cur, caches

    def _input_grad(self, caches, dlogits):
        """Backpropagate dlogits to the input; no parameter grads."""
        d = dlogits
        for spec, p, cache in zip(
            reversed(self.specs), reversed(self.params), reversed(caches)
        ):
            if spec.kind == "dense":
                d = kernels.dense_dx(np.ascontiguousarray(d), p[0])
            elif spec.kind == "flatten":
                d = np.ascontiguousarray(d.reshape(cache))
            elif spec.kind == "relu":
                d = d * cache
            elif spec.kind == "conv":
                d = kernels.conv2d_dx(np.ascontiguousarray(d), p[0])
        return d

    def _param_grads(self, caches, dlogits):
        """Backpropagate dlogits to every parameter; returns a params-shaped
        list of (dw, db) or None."""
        grads = [None] * len(self.specs)
        d = dlogits
        for i in range(len(self.specs) - 1, -1, -1):
            spec, p, cache = self.specs[i], self.params[i], caches[i]
            if spec.kind == "dense":
                d = np.ascontiguousarray(d)
                grads[i] = kernels.dense_dw(d, cache)
                d = kernels.dense_dx(d, p[0])
            elif spec.kind == "flatten":
                d = np.ascontiguousarray(d.reshape(cache))
            elif spec.kind == "relu":
                d = d * cache
            elif spec.kind == "conv":
                d = np.ascontiguousarray(d)
                grads[i] = kernels.conv2d_dw(d, cache, spec.k)
                d = kernels.conv2d_dx(d, p[0])
        return grads

    # -- public inference --------------------------------------------------

    def logits(self, x):
        xb, single = self._check_batch(x)
        z, _ = self._forward(xb)
        return z[0] if single else z

    def predict(self, x):
        z = self.logits(x)
        return np.argmax(z, axis=-1)

    def loss_and_input_grad(self, x, y):
        """Per-example cross-entropy and its input gradient.

        Returns (loss [B], grad [B,C,H,W]); for a single [C,H,W] input the
        batch axis is dropped. The gradient is of each example's own loss
        (no 1/B scaling), which is the convention the attack steps use.
        """
        xb, single = self._check_batch(x)
        yb = np.atleast_1d(np.asarray(y, dtype=np.int64))
        if yb.shape != (xb.shape[0],):
            raise ShapeError(f"labels shape {yb.shape} does not match batch {xb.shape[0]}")
        if yb.min() < 0 or yb.max() >= self.n_classes:
            raise ConfigError(f"labels must be in [0, {self.n_classes})")
        z, caches = self._forward(xb)
        losses = cross_entropy(z, yb)
        dlogits = softmax(z)
        dlogits[np.arange(len(yb)), yb] -= 1.0
        grad = self._input_grad(caches, dlogits)
        if single:
            return float(losses[0]), grad[0]
        return losses, grad


def cross_entropy(logits, labels):
    """Per-example cross-entropy from raw logits, numerically stable."""
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if y.shape != (z.shape[0],):
        raise ShapeError(f"labels shape {y.shape} does not match logits {z.shape}")
    m = z.max(axis=1)
    lse = m + np.log(np.exp(z - m[:, None]).sum(axis=1))
    out = lse - z[np.arange(len(y)), y]
    return out if np.ndim(logits) == 2 else float(out[0])


def input_gradient(model, x, y):
    """Gradient of the per-example loss at (x, y); see loss_and_input_grad."""
    _, g = model.loss_and_input_grad(x, y)
    return g


def accuracy(model, images, labels):
    pred = model.predict(images)
    return float(np.mean(pred == np.asarray(labels)))


# -- training ----------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.1
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0


@dataclass(frozen=True)
class TrainMode:
    """normal, or adversarial with a PGD inner maximizer of radius eps and
    steps iterations (step size 2*eps/steps, random start)."""

    kind: str = "normal"
    eps: float = 0.0
    steps: int = 0

    def __post_init__(self):
        if self.kind not in ("normal", "adversarial"):
            raise ConfigError(f"unknown training mode {self.kind!r}")
        if self.kind == "adversarial":
            if not self.eps > 0:
                raise ConfigError("adversarial training needs eps > 0")
            if self.steps < 1:
                raise ConfigError("adversarial training needs steps >= 1")


def _pgd_batch(model, xb, yb, eps, steps, rng):
    x0 = xb
    x = clip_ball_and_range(x0 + rng.uniform(-eps, eps, x0.shape), x0, eps)
    alpha = 2.0 * eps / steps
    for _ in range(steps):
        _, g = model.loss_and_input_grad(x, yb)
        x = clip_ball_and_range(x + alpha * sign(g), x0, eps)
    return x


def train(specs, dataset, config=TrainConfig(), mode=TrainMode()):
    """SGD on mean cross-entropy; single worker, fully deterministic.

    Adversarial mode trains on PGD examples regenerated from the current
    parameters each batch, except the first epoch, which runs on clean
    batches: attacking the random init routinely drives small convnets into
    a predict-one-class minimum they never leave. Non-finite loss raises
    TrainingError naming the epoch and batch.
    """
    m = len(dataset)
    if m == 0:
        raise ConfigError("cannot train on an empty dataset")
    n_classes = dataset.n_classes
    if n_classes < 2:
        raise ConfigError("dataset has fewer than two classes")
    root = RngStream(config.seed)
    meta = TrainMeta(mode.kind, mode.eps, mode.steps, config.seed)
    model = Classifier.initialize(
        specs, dataset.image_shape, n_classes, root.child(0), meta
    )
    shuffle_rng = root.child(1)
    adv_rng = root.child(2)
    for epoch in range(config.epochs):
        perm = shuffle_rng.permutation(m)
        for bi, start in enumerate(range(0, m, config.batch_size)):
            idx = perm[start: start + config.batch_size]
            xb = np.ascontiguousarray(dataset.images[idx])
            yb = dataset.labels[idx]
            if mode.kind == "adversarial" and epoch >= 1:
                xb = _pgd_batch(model, xb, yb, mode.eps, mode.steps, adv_rng)
            z, caches = model._forward(xb)
            losses = cross_entropy(z, yb)
            mean_loss = float(np.mean(losses))
            if not np.isfinite(mean_loss):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} batch {bi}: {mean_loss}"
                )
            dlogits = softmax(z)
            dlogits[np.arange(len(yb)), yb] -= 1.0
            dlogits /= len(yb)
            grads = model._param_grads(caches, dlogits)
            new_params = []
            for p, g in zip(model.params, grads):
                if p is None:
                    new_params.append(None)
                else:
                    new_params.append((p[0] - config.lr * g[0], p[1] - config.lr * g[1]))
            model.params = new_params
    return model


# -- model zoo ----------------------------------------------------------------


def zoo_architectures(h):
    """Four distinct small architectures keyed by short names.

    The normal zoo trains all four normally; the robust zoo trains the first
    three adversarially. Input is (1, h, h).
    """
    return {
        # two-stage conv is kept wide enough (6->4 channels) that SGD does
        # not fall into the predict-one-class minimum on low-contrast data
        "convA": [conv(6, 3), relu(), conv(4, 3), relu(), flatten()],
        "convB": [conv(6, 5), relu(), flatten(), dense(32), relu()],
        "mlp": [flatten(), dense(64), relu()],
        "shallow": [conv(3, 3), relu(), flatten()],
    }


def build_arch(name, h, n_classes):
    archs = zoo_architectures(h)
    if name not in archs:
        raise ConfigError(f"unknown architecture {name!r}, have {sorted(archs)}")
    return archs[name] + [dense(n_classes)]


# -- model file io -------------------------------------------------------------


def save_model(model, path):
    """DAKM binary: magic, u16 version, training meta, input shape, layer
    table, then f64 parameter blobs in layer order (w then b)."""
    mode_code = 0 if model.meta.mode == "normal" else 1
    parts = [
        _MAGIC,
        struct.pack("<H", _VERSION),
        struct.pack("<B", mode_code),
        struct.pack("<d", model.meta.eps_train),
        struct.pack("<I", model.meta.steps_train),
        struct.pack("<Q", model.meta.seed),
        struct.pack("<4I", *model.input_shape, model.n_classes),
        struct.pack("<I", len(model.specs)),
    ]
    for spec in model.specs:
        parts.append(struct.pack("<BII", _KIND_CODES[spec.kind], spec.out, spec.k))
    for p in model.params:
        if p is not None:
            parts.append(np.ascontiguousarray(p[0], dtype="<f8").tobytes())
            parts.append(np.ascontiguousarray(p[1], dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_model(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise BadMagicError(f"{path}: expected magic {_MAGIC!r}, got {blob[:4]!r}")
    if len(blob) < 6:
        raise TruncatedFileError(6, len(blob))
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != _VERSION:
        raise FormatVersionError(version, _VERSION)
    header_end = 6 + 1 + 8 + 4 + 8 + 16 + 4
    if len(blob) < header_end:
        raise TruncatedFileError(header_end, len(blob))
    off = 6
    (mode_code,) = struct.unpack_from("<B", blob, off)
    off += 1
    (eps_train,) = struct.unpack_from("<d", blob, off)
    off += 8
    (steps_train,) = struct.unpack_from("<I", blob, off)
    off += 4
    (seed,) = struct.unpack_from("<Q", blob, off)
    off += 8
    c, h, w, n_classes = struct.unpack_from("<4I", blob, off)
    off += 16
    (n_layers,) = struct.unpack_from("<I", blob, off)
    off += 4
    table_end = off + 9 * n_layers
    if len(blob) < table_end:
        raise TruncatedFileError(table_end, len(blob))
    specs = []
    for _ in range(n_layers):
        kind_code, out, k = struct.unpack_from("<BII", blob, off)
        off += 9
        if kind_code not in _KIND_NAMES:
            raise BadMagicError(f"{path}: unknown layer kind code {kind_code}")
        specs.append(LayerSpec(_KIND_NAMES[kind_code], out=out, k=k))
    in_shapes = _propagate_shapes(specs, (c, h, w), n_classes)
    params = []
    expected = off
    shapes = []
    for spec, in_shape in zip(specs, in_shapes):
        if spec.kind == "conv":
            wsh = (spec.out, in_shape[0], spec.k, spec.k)
        elif spec.kind == "dense":
            wsh = (spec.out, in_shape[0])
        else:
            shapes.append(None)
            continue
        shapes.append(wsh)
        expected += 8 * (int(np.prod(wsh)) + spec.out)
    if len(blob) < expected:
        raise TruncatedFileError(expected, len(blob))
    for spec, wsh in zip(specs, shapes):
        if wsh is None:
            params.append(None)
            continue
        nw = int(np.prod(wsh))
        wv = np.frombuffer(blob, dtype="<f8", count=nw, offset=off).reshape(wsh).copy()
        off += 8 * nw
        bv = np.frombuffer(blob, dtype="<f8", count=spec.out, offset=off).copy()
        off += 8 * spec.out
        params.append((wv, bv))
    mode = "normal" if mode_code == 0 else "adversarial"
    meta = TrainMeta(mode, eps_train, steps_train, seed)
    return Classifier(specs, (c, h, w), n_classes, params, meta)
