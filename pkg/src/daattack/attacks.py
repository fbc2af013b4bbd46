"""Attack presets and the batched attack engine.

All attacks share one update engine: an optional uniform random start, T
iterations of a direction computation (single gradient, or an aggregate of
sign-gradients over noisy/transformed copies), optional kernel smoothing of
the direction, optional L1-normalized momentum accumulation, a signed step of
size alpha, and projection onto the epsilon ball intersected with [0, 1].

Randomness contract (what makes runs replayable and worker counts
invisible): each example owns the stream RngStream(config.seed).child(id)
where id is its dataset position. Per example the engine consumes, in order:
the random-start offset if any, then per iteration the noise block of
aggregate+1 offsets (drawn even when sigma is 0 aggregation still consumes
nothing, and even when clean_anchor replaces the first offset with zero),
then the resize-and-pad draws of that iteration in noise-sample order.

The per-example direction, momentum, and projection are all row-local, so a
batch split across workers is byte-identical to a single-worker run.
"""

import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import (
    BadMagicError,
    ConfigError,
    FormatVersionError,
    ShapeError,
    TruncatedFileError,
)
from .nets import cross_entropy
from .ops import clip_ball_and_range, sample_noise, sign, softmax
from .rng import RngStream
from .transforms import (
    DimSpec,
    KernelSpec,
    default_kernel_radius,
    delta_kernel,
    gaussian_kernel,
    dim_transform,
    smooth_gradient,
)

_MAGIC = b"DAKA"
_VERSION = 1


@dataclass(frozen=True)
class AttackConfig:
    """Fully resolved attack parameters; presets are factories for these."""

    name: str
    epsilon: float = 16 / 255
    iters: int = 12
    alpha: float = None  # None means epsilon / iters
    momentum: float = None  # None disables the momentum route; 0.0 keeps it
    random_start: bool = False
    aggregate: int = 0  # N; 0 disables direction aggregation
    noise_kind: str = "gaussian"
    sigma: float = 0.05
    noise_lo: float = -0.08
    noise_hi: float = 0.08
    clean_anchor: bool = False
    dim: DimSpec = None
    kernel: KernelSpec = None
    seed: int = 0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ConfigError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.iters < 1:
            raise ConfigError(f"iters must be >= 1, got {self.iters}")
        if self.alpha is not None and not self.alpha > 0:
            raise ConfigError(f"alpha must be > 0, got {self.alpha}")
        if self.momentum is not None and self.momentum < 0:
            raise ConfigError(f"momentum must be >= 0, got {self.momentum}")
        if self.aggregate < 0:
            raise ConfigError(f"aggregate must be >= 0, got {self.aggregate}")
        if self.noise_kind not in ("gaussian", "uniform"):
            raise ConfigError(f"unknown noise kind {self.noise_kind!r}")
        if self.sigma < 0:
            raise ConfigError(f"sigma must be >= 0, got {self.sigma}")
        if not self.noise_lo < self.noise_hi:
            raise ConfigError(
                f"noise bounds must satisfy lo < hi, got [{self.noise_lo}, {self.noise_hi}]"
            )

    @property
    def step_size(self):
        return self.alpha if self.alpha is not None else self.epsilon / self.iters

    def to_dict(self):
        d = {
            "name": self.name,
            "epsilon": self.epsilon,
            "iters": self.iters,
            "alpha": self.alpha,
            "momentum": self.momentum,
            "random_start": self.random_start,
            "aggregate": self.aggregate,
            "noise_kind": self.noise_kind,
            "sigma": self.sigma,
            "noise_lo": self.noise_lo,
            "noise_hi": self.noise_hi,
            "clean_anchor": self.clean_anchor,
            "dim": None if self.dim is None else {"p": self.dim.p, "min_scale": self.dim.min_scale},
            "kernel": None
            if self.kernel is None
            else {"kind": "delta" if self.kernel.sigma == 0.0 else "gaussian", "k": self.kernel.k},
            "seed": self.seed,
        }
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        dim = d.get("dim")
        if dim is not None:
            d["dim"] = DimSpec(**dim)
        kern = d.get("kernel")
        if kern is not None:
            maker = delta_kernel if kern["kind"] == "delta" else gaussian_kernel
            d["kernel"] = maker(kern["k"])
        return cls(**d)


PRESETS = (
    "fgsm",
    "i-fgsm",
    "pgd",
    "mi-fgsm",
    "dim",
    "tim",
    "ti-dim",
    "da-fgsm",
    "da-i-fgsm",
    "da-mi-fgsm",
    "da-dim",
    "da-tim",
    "da-ti-dim",
)


def attack_config(preset, hw=None, **overrides):
    """Build an AttackConfig for a named preset.

    hw (image side) is required by the tim presets to pick the default
    smoothing radius, unless a kernel override is given. Any field of
    AttackConfig can be overridden; kernel_radius is a convenience override
    for the smoothing radius.
    """
    if preset not in PRESETS:
        raise ConfigError(f"unknown attack preset {preset!r}, have {PRESETS}")
    base = {"name": preset}
    if preset == "fgsm":
        base.update(iters=1)
    elif preset == "i-fgsm":
        pass
    elif preset == "pgd":
        base.update(random_start=True)
    elif preset == "mi-fgsm":
        base.update(momentum=1.0)
    elif preset == "dim":
        base.update(momentum=1.0, dim=DimSpec(p=0.5))
    elif preset == "tim":
        base.update(momentum=1.0, kernel="auto")
    elif preset == "ti-dim":
        base.update(momentum=1.0, dim=DimSpec(p=0.5), kernel="auto")
    elif preset == "da-fgsm":
        base.update(iters=1, aggregate=30)
    elif preset == "da-i-fgsm":
        base.update(aggregate=30)
    elif preset == "da-mi-fgsm":
        base.update(momentum=1.0, aggregate=30)
    elif preset == "da-dim":
        base.update(momentum=1.0, aggregate=30, dim=DimSpec(p=0.5))
    elif preset == "da-tim":
        base.update(momentum=1.0, aggregate=30, kernel="auto")
    elif preset == "da-ti-dim":
        base.update(momentum=1.0, aggregate=30, dim=DimSpec(p=0.5), kernel="auto")
    radius = overrides.pop("kernel_radius", None)
    base.update(overrides)
    if base.get("kernel") == "auto":
        if radius is None:
            if hw is None:
                raise ConfigError(f"preset {preset!r} needs hw or kernel_radius")
            radius = default_kernel_radius(hw)
        base["kernel"] = gaussian_kernel(radius)
    elif radius is not None:
        base["kernel"] = gaussian_kernel(radius)
    if preset == "fgsm" or preset == "da-fgsm":
        # one full-budget step
        base.setdefault("alpha", base.get("epsilon", 16 / 255))
    return AttackConfig(**base)


@dataclass
class AttackResult:
    """Adversarial set plus provenance: originals, labels, per-iteration
    losses, the resolved config, and the crafting model's id."""

    x_star: np.ndarray
    x: np.ndarray
    y: np.ndarray
    example_ids: np.ndarray
    loss_trace: np.ndarray  # [iters, M]
    config: AttackConfig
    source_id: str = ""

    @property
    def perturbation(self):
        return self.x_star - self.x

    def __len__(self):
        return self.x.shape[0]


def _draw_noise_block(stream, n_draws, shape, cfg):
    if cfg.noise_kind == "gaussian":
        return sample_noise(stream, (n_draws,) + shape, "gaussian", sigma=cfg.sigma)
    return sample_noise(
        stream, (n_draws,) + shape, "uniform", lo=cfg.noise_lo, hi=cfg.noise_hi
    )


def _apply_dim_batch(xb, spec, streams):
    out = np.empty_like(xb)
    for m in range(xb.shape[0]):
        out[m] = dim_transform(xb[m], spec, streams[m])
    return out


def _attack_chunk(model, x0, y, ids, cfg):
    """Run the full attack on one contiguous chunk of examples."""
    m = x0.shape[0]
    shape = x0.shape[1:]
    eps = cfg.epsilon
    alpha = cfg.step_size
    streams = [RngStream(cfg.seed).child(int(i)) for i in ids]
    x0 = np.ascontiguousarray(x0)
    if cfg.random_start:
        start = np.stack([s.uniform(-eps, eps, shape) for s in streams])
        x = clip_ball_and_range(x0 + start, x0, eps)
    else:
        x = x0.copy()
    g_mom = np.zeros_like(x0)
    trace = np.empty((cfg.iters, m))
    n_draws = cfg.aggregate + 1
    for _t in range(cfg.iters):
        if cfg.aggregate > 0:
            blocks = np.stack(
                [_draw_noise_block(s, n_draws, shape, cfg) for s in streams]
            )
            if cfg.clean_anchor:
                blocks[:, 0] = 0.0
            direction = np.zeros_like(x)
            for i in range(n_draws):
                xi = x + blocks[:, i]
                if cfg.dim is not None:
                    xi = _apply_dim_batch(xi, cfg.dim, streams)
                _, g = model.loss_and_input_grad(xi, y)
                direction += sign(g)
        else:
            xi = x
            if cfg.dim is not None:
                xi = _apply_dim_batch(x, cfg.dim, streams)
            _, direction = model.loss_and_input_grad(xi, y)
        if cfg.kernel is not None:
            direction = smooth_gradient(direction, cfg.kernel)
        if cfg.momentum is not None:
            l1 = np.sum(np.abs(direction), axis=(1, 2, 3), keepdims=True)
            safe = np.where(l1 > 0.0, l1, 1.0)
            g_mom = cfg.momentum * g_mom + np.where(l1 > 0.0, direction / safe, 0.0)
            step_dir = sign(g_mom)
        else:
            step_dir = sign(direction)
        x = clip_ball_and_range(x + alpha * step_dir, x0, eps)
        trace[_t] = cross_entropy(model.logits(x), y)
    return x, trace


def run_attack(model, x, y, config, *, example_ids=None, workers=1, source_id=""):
    """Craft adversarial examples for a batch.

    x: [M,C,H,W] (or a single [C,H,W]) in [0,1]; y: true labels.
    example_ids: per-example stream indices, default 0..M-1; pass dataset
    positions when attacking a subset so results don't depend on the subset.
    workers: split the batch into that many contiguous chunks and run them on
    a thread pool; output bytes are identical for any worker count.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4:
        raise ShapeError(f"expected [M,C,H,W] or [C,H,W], got {x.shape}")
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    m = x.shape[0]
    if y.shape != (m,):
        raise ShapeError(f"labels shape {y.shape} does not match batch {m}")
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise ConfigError("inputs must lie in [0, 1]")
    if example_ids is None:
        example_ids = np.arange(m, dtype=np.int64)
    else:
        example_ids = np.asarray(example_ids, dtype=np.int64)
        if example_ids.shape != (m,):
            raise ShapeError(
                f"example_ids shape {example_ids.shape} does not match batch {m}"
            )
    if workers < 1:
        raise ConfigError(f"workers must be >= 1, got {workers}")
    x = np.ascontiguousarray(x)
    if workers == 1 or m < 2:
        x_star, trace = _attack_chunk(model, x, y, example_ids, config)
    else:
        bounds = np.linspace(0, m, min(workers, m) + 1).astype(int)
        x_star = np.empty_like(x)
        trace = np.empty((config.iters, m))

        def run_part(lo, hi):
            xs, tr = _attack_chunk(
                model,
                np.ascontiguousarray(x[lo:hi]),
                y[lo:hi],
                example_ids[lo:hi],
                config,
            )
            x_star[lo:hi] = xs
            trace[:, lo:hi] = tr

        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(run_part, lo, hi)
                for lo, hi in zip(bounds[:-1], bounds[1:])
                if hi > lo
            ]
            for f in futures:
                f.result()
    return AttackResult(
        x_star=x_star,
        x=x,
        y=y,
        example_ids=example_ids,
        loss_trace=trace,
        config=config,
        source_id=source_id,
    )


# -- direction aggregation and the smoothed-gradient connection ---------------


def aggregate_direction(
    model,
    x,
    y,
    n,
    rng,
    *,
    noise_kind="gaussian",
    sigma=0.05,
    noise_lo=-0.08,
    noise_hi=0.08,
    transform=None,
    mode="sign",
    clean_anchor=False,
):
    """Aggregate directions over n+1 noisy copies of one example [C,H,W].

    mode="sign" sums sign-gradients (the attack's rule); mode="grad" sums raw
    gradients, in which case the result is parallel to a Monte-Carlo smoothed
    gradient over n+1 samples drawn from the same stream.
    """
    if mode not in ("sign", "grad"):
        raise ConfigError(f"unknown aggregation mode {mode!r}")
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeError(f"expected [C,H,W], got {x.shape}")
    if noise_kind == "gaussian":
        block = sample_noise(rng, (n + 1,) + x.shape, "gaussian", sigma=sigma)
    elif noise_kind == "uniform":
        block = sample_noise(
            rng, (n + 1,) + x.shape, "uniform", lo=noise_lo, hi=noise_hi
        )
    else:
        raise ConfigError(f"unknown noise kind {noise_kind!r}")
    if clean_anchor:
        block[0] = 0.0
    out = np.zeros_like(x)
    for i in range(n + 1):
        xi = x + block[i]
        if transform is not None:
            xi = dim_transform(xi, transform, rng)
        _, g = model.loss_and_input_grad(xi, y)
        out += sign(g) if mode == "sign" else g
    return out


def smoothed_gradient_mc(model, x, y, n_samples, sigma, rng):
    """Monte-Carlo gradient of the Gaussian-smoothed loss at one example:
    mean of input gradients over n_samples draws of N(0, sigma^2) offsets."""
    if n_samples < 1:
        raise ConfigError(f"n_samples must be >= 1, got {n_samples}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeError(f"expected [C,H,W], got {x.shape}")
    block = sample_noise(rng, (n_samples,) + x.shape, "gaussian", sigma=sigma)
    out = np.zeros_like(x)
    for i in range(n_samples):
        _, g = model.loss_and_input_grad(x + block[i], y)
        out += g
    return out / n_samples


# -- ensembles -----------------------------------------------------------------


class Ensemble:
    """Logit-fusion ensemble: weighted sum of member logits, one loss."""

    def __init__(self, models, weights=None):
        if not models:
            raise ConfigError("ensemble needs at least one model")
        shapes = {m.input_shape for m in models}
        classes = {m.n_classes for m in models}
        if len(shapes) != 1 or len(classes) != 1:
            raise ConfigError("ensemble members disagree on input shape or classes")
        self.models = list(models)
        k = len(models)
        if weights is None:
            weights = np.full(k, 1.0 / k)
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (k,):
            raise ConfigError(f"need {k} weights, got shape {weights.shape}")
        if np.any(weights <= 0) or abs(weights.sum() - 1.0) > 1e-9:
            raise ConfigError("weights must be positive and sum to 1")
        self.weights = weights
        self.input_shape = models[0].input_shape
        self.n_classes = models[0].n_classes

    def logits(self, x):
        out = self.weights[0] * self.models[0].logits(x)
        for w, m in zip(self.weights[1:], self.models[1:]):
            out = out + w * m.logits(x)
        return out

    def predict(self, x):
        return np.argmax(self.logits(x), axis=-1)

    def loss_and_input_grad(self, x, y):
        xb, single = self.models[0]._check_batch(x)
        yb = np.atleast_1d(np.asarray(y, dtype=np.int64))
        forwards = [m._forward(xb) for m in self.models]
        fused = np.zeros_like(forwards[0][0])
        for w, (z, _) in zip(self.weights, forwards):
            fused += w * z
        losses = cross_entropy(fused, yb)
        dlogits = softmax(fused)
        dlogits[np.arange(len(yb)), yb] -= 1.0
        grad = np.zeros_like(xb)
        for w, m, (_, caches) in zip(self.weights, self.models, forwards):
            grad += m._input_grad(caches, w * dlogits)
        if single:
            return float(losses[0]), grad[0]
        return losses, grad


def ensemble_logits(models, weights, x):
    return Ensemble(models, weights).logits(x)


# -- adversarial-set file io -----------------------------------------------------


def save_attack_result(result, path, extra_meta=None):
    """DAKA binary: magic, u16 version, JSON config block, dims, then f64
    originals, f64 adversarials, u16 labels, u32 example ids, f64 loss trace.

    extra_meta merges additional keys (e.g. a config hash) into the JSON
    block; the loader ignores keys it does not know.
    """
    if result.y.size and result.y.max() > 0xFFFF:
        raise ConfigError("labels exceed u16 range")
    meta = {
        "config": result.config.to_dict(),
        "source_id": result.source_id,
    }
    if extra_meta:
        for key in extra_meta:
            if key in meta:
                raise ConfigError(f"extra_meta would shadow {key!r}")
        meta.update(extra_meta)
    meta_b = json.dumps(meta, sort_keys=True).encode()
    m, c, h, w = result.x.shape
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<H", _VERSION))
        fh.write(struct.pack("<I", len(meta_b)))
        fh.write(meta_b)
        fh.write(struct.pack("<5I", m, c, h, w, result.loss_trace.shape[0]))
        fh.write(np.ascontiguousarray(result.x, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(result.x_star, dtype="<f8").tobytes())
        fh.write(result.y.astype("<u2").tobytes())
        fh.write(result.example_ids.astype("<u4").tobytes())
        fh.write(np.ascontiguousarray(result.loss_trace, dtype="<f8").tobytes())


def load_attack_result(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise BadMagicError(f"{path}: expected magic {_MAGIC!r}, got {blob[:4]!r}")
    if len(blob) < 10:
        raise TruncatedFileError(10, len(blob))
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != _VERSION:
        raise FormatVersionError(version, _VERSION)
    (meta_len,) = struct.unpack_from("<I", blob, 6)
    off = 10
    if len(blob) < off + meta_len + 20:
        raise TruncatedFileError(off + meta_len + 20, len(blob))
    meta = json.loads(blob[off: off + meta_len].decode())
    off += meta_len
    m, c, h, w, t = struct.unpack_from("<5I", blob, off)
    off += 20
    img = m * c * h * w
    expected = off + 8 * img * 2 + 2 * m + 4 * m + 8 * t * m
    if len(blob) < expected:
        raise TruncatedFileError(expected, len(blob))
    x = np.frombuffer(blob, dtype="<f8", count=img, offset=off).reshape(m, c, h, w).copy()
    off += 8 * img
    x_star = (
        np.frombuffer(blob, dtype="<f8", count=img, offset=off).reshape(m, c, h, w).copy()
    )
    off += 8 * img
    y = np.frombuffer(blob, dtype="<u2", count=m, offset=off).astype(np.int64)
    off += 2 * m
    ids = np.frombuffer(blob, dtype="<u4", count=m, offset=off).astype(np.int64)
    off += 4 * m
    trace = np.frombuffer(blob, dtype="<f8", count=t * m, offset=off).reshape(t, m).copy()
    return AttackResult(
        x_star=x_star,
        x=x,
        y=y,
        example_ids=ids,
        loss_trace=trace,
        config=AttackConfig.from_dict(meta["config"]),
        source_id=meta["source_id"],
    )
