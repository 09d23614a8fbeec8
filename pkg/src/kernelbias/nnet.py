"""Dense-tensor CNN with configurable first-layer kernel size, exact
backpropagation to parameters and input pixels, and a deterministic
training loop.

Everything runs in 64-bit floats. Layer parameters and all random draws
(initialization, epoch shuffling) come from PCG64 streams derived from the
model seed, so a (seed, config, hyper, dataset order) tuple fully determines
the trained model, bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .imgfreq import ImageTensor

__all__ = [
    "LayerSpec",
    "ModelConfig",
    "TrainedModel",
    "TrainHyper",
    "EpochStats",
    "GroupAccuracy",
    "GroupAccuracyTable",
    "ConfigurationError",
    "TrainingFailureError",
    "conv",
    "relu",
    "maxpool",
    "dense",
    "default_architecture",
    "init_model",
    "forward",
    "forward_backward",
    "loss_and_grads",
    "train",
    "predict",
    "evaluate_by_group",
    "save_checkpoint",
    "load_checkpoint",
]


class ConfigurationError(ValueError):
    """Raised for inconsistent layer/shape configuration."""


class TrainingFailureError(RuntimeError):
    """Raised when training diverges; carries the failing epoch."""

    def __init__(self, message: str, epoch: int):
        super().__init__(message)
        self.epoch = epoch


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv | relu | maxpool | dense
    out_channels: int = 0
    kernel_size: int = 0
    stride: int = 1
    padding: int = 0
    window: int = 0
    out_features: int = 0

    def __post_init__(self):
        if self.kind not in ("conv", "relu", "maxpool", "dense"):
            raise ConfigurationError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv":
            if self.kernel_size < 1 or self.kernel_size % 2 == 0:
                raise ConfigurationError(f"conv kernel size must be odd and >= 1, got {self.kernel_size}")
            if self.stride < 1:
                raise ConfigurationError("conv stride must be >= 1")
            if self.out_channels < 1:
                raise ConfigurationError("conv needs out_channels >= 1")
        if self.kind == "maxpool" and self.window < 1:
            raise ConfigurationError("maxpool needs window >= 1")
        if self.kind == "dense" and self.out_features < 1:
            raise ConfigurationError("dense needs out_features >= 1")


def conv(out_channels: int, kernel_size: int, stride: int = 1, padding: int | None = None) -> LayerSpec:
    if padding is None:
        padding = kernel_size // 2  # 'same' for stride 1
    return LayerSpec("conv", out_channels=out_channels, kernel_size=kernel_size, stride=stride, padding=padding)


def relu() -> LayerSpec:
    return LayerSpec("relu")


def maxpool(window: int) -> LayerSpec:
    return LayerSpec("maxpool", window=window)


def dense(out_features: int) -> LayerSpec:
    return LayerSpec("dense", out_features=out_features)


def default_architecture(flks: int, num_categories: int = 2, conv2_kernel: int = 3) -> tuple[LayerSpec, ...]:
    """Reference desk-scale stack: conv(flks, 8) -> relu -> pool2 -> conv(k2, 16) -> relu -> pool2 -> dense."""
    return (
        conv(8, flks),
        relu(),
        maxpool(2),
        conv(16, conv2_kernel),
        relu(),
        maxpool(2),
        dense(num_categories),
    )


@dataclass(frozen=True)
class ModelConfig:
    layers: tuple[LayerSpec, ...]
    input_dims: tuple[int, int, int]  # (C, H, W)
    num_categories: int
    flks: int | None
    init_variance: float = 0.02
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_dims", tuple(self.input_dims))
        if self.init_variance <= 0:
            raise ConfigurationError("init_variance must be positive")
        has_conv = any(s.kind == "conv" for s in self.layers)
        if has_conv:
            if self.layers[0].kind != "conv":
                raise ConfigurationError("first layer must be conv when the model has conv layers")
            if self.flks != self.layers[0].kernel_size:
                raise ConfigurationError(
                    f"flks={self.flks} must mirror the first conv kernel size {self.layers[0].kernel_size}"
                )
        elif self.flks is not None:
            raise ConfigurationError("flks must be None for a model without conv layers")
        out = self.layer_shapes()[-1]
        flat = int(np.prod(out))
        if flat != self.num_categories:
            raise ConfigurationError(
                f"final layer produces {flat} values but num_categories={self.num_categories}"
            )

    def layer_shapes(self) -> list[tuple]:
        """Output shape after each layer; index 0 is the input shape."""
        shapes: list[tuple] = [self.input_dims]
        state = self.input_dims
        flattened = False
        for spec in self.layers:
            if spec.kind == "conv":
                if flattened:
                    raise ConfigurationError("conv after dense is not supported")
                c, h, w = state
                oh = (h + 2 * spec.padding - spec.kernel_size) // spec.stride + 1
                ow = (w + 2 * spec.padding - spec.kernel_size) // spec.stride + 1
                if oh < 1 or ow < 1:
                    raise ConfigurationError(f"conv output dims non-positive: ({oh}, {ow})")
                state = (spec.out_channels, oh, ow)
            elif spec.kind == "maxpool":
                if flattened:
                    raise ConfigurationError("maxpool after dense is not supported")
                c, h, w = state
                oh, ow = h // spec.window, w // spec.window
                if oh < 1 or ow < 1:
                    raise ConfigurationError(f"maxpool output dims non-positive: ({oh}, {ow})")
                state = (c, oh, ow)
            elif spec.kind == "dense":
                state = (spec.out_features,)
                flattened = True
            # relu keeps the shape
            shapes.append(state)
        return shapes

    def param_shapes(self) -> list[tuple[tuple, tuple] | None]:
        """(weight_shape, bias_shape) per layer, None for parameterless layers."""
        shapes = self.layer_shapes()
        out: list[tuple[tuple, tuple] | None] = []
        for i, spec in enumerate(self.layers):
            if spec.kind == "conv":
                ic = shapes[i][0]
                out.append(((spec.out_channels, ic, spec.kernel_size, spec.kernel_size), (spec.out_channels,)))
            elif spec.kind == "dense":
                in_features = int(np.prod(shapes[i]))
                out.append(((in_features, spec.out_features), (spec.out_features,)))
            else:
                out.append(None)
        return out


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    loss: float
    accuracy: float
    lr: float


@dataclass(frozen=True)
class TrainedModel:
    config: ModelConfig
    weights: tuple  # per layer: None or (weight, bias) float64 arrays
    training_log: tuple[EpochStats, ...] = ()
    label_map: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(self.weights))
        object.__setattr__(self, "training_log", tuple(self.training_log))
        expected = self.config.param_shapes()
        if len(self.weights) != len(expected):
            raise ConfigurationError("one weight slot per layer required")
        for slot, exp in zip(self.weights, expected):
            if (slot is None) != (exp is None):
                raise ConfigurationError("weight slots do not match parameterized layers")
            if slot is not None and (slot[0].shape != exp[0] or slot[1].shape != exp[1]):
                raise ConfigurationError(f"weight shape {slot[0].shape} != expected {exp[0]}")
        for entry in self.training_log:
            if not np.isfinite(entry.loss):
                raise ConfigurationError("training log contains non-finite loss")
        if not self.label_map:
            object.__setattr__(self, "label_map", {i: str(i) for i in range(self.config.num_categories)})

    def parameter_count(self) -> int:
        return sum(w.size + b.size for slot in self.weights if slot is not None for w, b in [slot])


@dataclass(frozen=True)
class TrainHyper:
    batch_size: int = 32
    lr: float = 1e-3
    lr_decay_epochs: tuple[int, ...] = (13, 17)
    lr_decay_factor: float = 0.1
    epochs: int = 20
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigurationError("lr must be positive")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        object.__setattr__(self, "lr_decay_epochs", tuple(self.lr_decay_epochs))


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


def _stream(seed: int, purpose: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, purpose])))


def init_model(config: ModelConfig) -> TrainedModel:
    """Draw every weight and bias i.i.d. from Normal(0, init_variance)."""
    rng = _stream(config.seed, 0)
    std = float(np.sqrt(config.init_variance))
    weights = []
    for shapes in config.param_shapes():
        if shapes is None:
            weights.append(None)
        else:
            w = rng.normal(0.0, std, size=shapes[0])
            b = rng.normal(0.0, std, size=shapes[1])
            weights.append((w, b))
    return TrainedModel(config=config, weights=tuple(weights))


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


def _stack_batch(batch) -> np.ndarray:
    if isinstance(batch, np.ndarray):
        x = np.asarray(batch, dtype=np.float64)
        if x.ndim == 3:
            x = x[np.newaxis]
        return x
    return np.stack([img.values for img in batch]).astype(np.float64)


def _im2col(x: np.ndarray, k: int, stride: int, padding: int):
    n, c, h, w = x.shape
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1
    if padding:
        xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
        xp[:, :, padding : padding + h, padding : padding + w] = x
    else:
        xp = x
    cols = np.empty((n, c, k, k, oh, ow))
    for ki in range(k):
        for kj in range(k):
            cols[:, :, ki, kj] = xp[:, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride]
    return cols.reshape(n, c * k * k, oh * ow), oh, ow


def _col2im(dcols: np.ndarray, x_shape, k: int, stride: int, padding: int, oh: int, ow: int) -> np.ndarray:
    n, c, h, w = x_shape
    dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
    d = dcols.reshape(n, c, k, k, oh, ow)
    for ki in range(k):
        for kj in range(k):
            dxp[:, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride] += d[:, :, ki, kj]
    if padding:
        return dxp[:, :, padding : padding + h, padding : padding + w]
    return dxp


def _forward_cached(model: TrainedModel, x: np.ndarray):
    caches = []
    a = x
    for spec, slot in zip(model.config.layers, model.weights):
        if spec.kind == "conv":
            w, b = slot
            cols, oh, ow = _im2col(a, spec.kernel_size, spec.stride, spec.padding)
            wmat = w.reshape(spec.out_channels, -1)
            out = np.matmul(wmat, cols) + b[:, np.newaxis]
            caches.append(("conv", a.shape, cols, oh, ow))
            a = out.reshape(a.shape[0], spec.out_channels, oh, ow)
        elif spec.kind == "relu":
            mask = a > 0
            caches.append(("relu", mask))
            a = a * mask
        elif spec.kind == "maxpool":
            n, c, h, w_ = a.shape
            win = spec.window
            oh, ow = h // win, w_ // win
            cropped = a[:, :, : oh * win, : ow * win]
            windows = cropped.reshape(n, c, oh, win, ow, win).transpose(0, 1, 2, 4, 3, 5)
            flat = windows.reshape(n, c, oh, ow, win * win)
            arg = np.argmax(flat, axis=-1)
            out = np.take_along_axis(flat, arg[..., np.newaxis], axis=-1)[..., 0]
            caches.append(("maxpool", a.shape, arg))
            a = out
        elif spec.kind == "dense":
            flat_in = a.reshape(a.shape[0], -1)
            w, b = slot
            caches.append(("dense", a.shape, flat_in))
            a = flat_in @ w + b
    return a, caches


def _backward(model: TrainedModel, caches, dout: np.ndarray, need_param_grads: bool):
    param_grads: list = [None] * len(model.config.layers)
    g = dout
    for i in range(len(model.config.layers) - 1, -1, -1):
        spec = model.config.layers[i]
        cache = caches[i]
        if spec.kind == "conv":
            _, x_shape, cols, oh, ow = cache
            w, _ = model.weights[i]
            n = x_shape[0]
            gm = g.reshape(n, spec.out_channels, oh * ow)
            if need_param_grads:
                dw = np.einsum("nop,nkp->ok", gm, cols).reshape(w.shape)
                db = gm.sum(axis=(0, 2))
                param_grads[i] = (dw, db)
            wmat = w.reshape(spec.out_channels, -1)
            dcols = np.matmul(wmat.T, gm)
            g = _col2im(dcols, x_shape, spec.kernel_size, spec.stride, spec.padding, oh, ow)
        elif spec.kind == "relu":
            g = g * cache[1]
        elif spec.kind == "maxpool":
            _, x_shape, arg = cache
            n, c, h, w_ = x_shape
            win = spec.window
            oh, ow = h // win, w_ // win
            flat = np.zeros((n, c, oh, ow, win * win))
            np.put_along_axis(flat, arg[..., np.newaxis], g[..., np.newaxis], axis=-1)
            windows = flat.reshape(n, c, oh, ow, win, win).transpose(0, 1, 2, 4, 3, 5)
            dx = np.zeros(x_shape)
            dx[:, :, : oh * win, : ow * win] = windows.reshape(n, c, oh * win, ow * win)
            g = dx
        elif spec.kind == "dense":
            _, x_shape, flat_in = cache
            w, _ = model.weights[i]
            if need_param_grads:
                param_grads[i] = (flat_in.T @ g, g.sum(axis=0))
            g = (g @ w.T).reshape(x_shape)
    return param_grads, g


def forward(model: TrainedModel, batch) -> np.ndarray:
    """Logits for a batch; batch is a list of ImageTensor or an (N, C, H, W) array."""
    x = _stack_batch(batch)
    if x.shape[1:] != tuple(model.config.input_dims):
        raise ConfigurationError(
            f"batch dims {x.shape[1:]} do not match config input dims {model.config.input_dims}"
        )
    if not np.all(np.isfinite(x)):
        raise ConfigurationError("batch contains non-finite values")
    logits, _ = _forward_cached(model, x)
    return logits.reshape(x.shape[0], -1)


def forward_backward(model: TrainedModel, batch, dlogits_fn, need_param_grads: bool = True):
    """Single forward pass plus backprop of caller-supplied logit gradients.

    ``dlogits_fn`` maps the (N, K) logits to the gradient of a scalar
    objective with respect to them. Returns (logits, param_grads, input_grads).
    """
    x = _stack_batch(batch)
    if x.shape[1:] != tuple(model.config.input_dims):
        raise ConfigurationError(
            f"batch dims {x.shape[1:]} do not match config input dims {model.config.input_dims}"
        )
    raw, caches = _forward_cached(model, x)
    logits = raw.reshape(x.shape[0], -1)
    dlogits = dlogits_fn(logits)
    param_grads, input_grads = _backward(model, caches, dlogits.reshape(raw.shape), need_param_grads)
    return logits, param_grads, input_grads


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    return float(np.mean(log_norm - z[np.arange(len(labels)), labels]))


def loss_and_grads(model: TrainedModel, batch, labels):
    """Mean cross-entropy loss with exact gradients for parameters and inputs."""
    labels = np.asarray(labels, dtype=np.intp)
    if labels.min() < 0 or labels.max() >= model.config.num_categories:
        raise ConfigurationError("labels out of range")
    state = {}

    def dlogits_fn(logits):
        state["loss"] = cross_entropy(logits, labels)
        probs = _softmax(logits)
        probs[np.arange(len(labels)), labels] -= 1.0
        return probs / len(labels)

    _, param_grads, input_grads = forward_backward(model, batch, dlogits_fn)
    return state["loss"], param_grads, input_grads


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _sample_arrays(samples) -> tuple[np.ndarray, np.ndarray]:
    images = np.stack([s.image.values for s in samples]).astype(np.float64)
    labels = np.array([s.category for s in samples], dtype=np.intp)
    return images, labels


def train(model: TrainedModel, samples, hyper: TrainHyper) -> TrainedModel:
    """Mini-batch training; deterministic given (config.seed, sample order, hyper)."""
    if hyper.epochs == 0:
        return replace(model, weights=tuple(None if s is None else (s[0].copy(), s[1].copy()) for s in model.weights))
    if not samples:
        raise ConfigurationError("training dataset is empty")
    images, labels = _sample_arrays(samples)
    categories = set(int(c) for c in labels)
    if max(categories) >= model.config.num_categories:
        raise ConfigurationError("sample categories exceed num_categories")

    weights = [None if s is None else (s[0].copy(), s[1].copy()) for s in model.weights]
    work = replace(model, weights=tuple(weights))
    params = [slot for slot in weights if slot is not None]
    adam_m = [(np.zeros_like(w), np.zeros_like(b)) for w, b in params]
    adam_v = [(np.zeros_like(w), np.zeros_like(b)) for w, b in params]

    rng = _stream(model.config.seed, 1)
    lr = hyper.lr
    n = len(samples)
    log = list(model.training_log)
    step = 0
    for epoch in range(1, hyper.epochs + 1):
        if epoch in hyper.lr_decay_epochs:
            lr *= hyper.lr_decay_factor
        order = rng.permutation(n)
        loss_sum = 0.0
        correct = 0
        for start in range(0, n, hyper.batch_size):
            idx = order[start : start + hyper.batch_size]
            xb, yb = images[idx], labels[idx]
            state = {}

            def dlogits_fn(logits):
                state["loss"] = cross_entropy(logits, yb)
                state["pred"] = np.argmax(logits, axis=1)
                probs = _softmax(logits)
                probs[np.arange(len(yb)), yb] -= 1.0
                return probs / len(yb)

            _, pgrads, _ = forward_backward(work, xb, dlogits_fn)
            if not np.isfinite(state["loss"]):
                raise TrainingFailureError(f"non-finite loss at epoch {epoch}", epoch=epoch)
            loss_sum += state["loss"] * len(idx)
            correct += int(np.sum(state["pred"] == yb))
            step += 1
            p_i = 0
            for li, slot in enumerate(weights):
                if slot is None:
                    continue
                gw, gb = pgrads[li]
                if hyper.optimizer == "sgd":
                    slot[0][...] = slot[0] - lr * gw
                    slot[1][...] = slot[1] - lr * gb
                else:
                    for arr, grad, m, v in (
                        (slot[0], gw, adam_m[p_i][0], adam_v[p_i][0]),
                        (slot[1], gb, adam_m[p_i][1], adam_v[p_i][1]),
                    ):
                        m[...] = hyper.beta1 * m + (1 - hyper.beta1) * grad
                        v[...] = hyper.beta2 * v + (1 - hyper.beta2) * grad * grad
                        m_hat = m / (1 - hyper.beta1**step)
                        v_hat = v / (1 - hyper.beta2**step)
                        arr[...] = arr - lr * m_hat / (np.sqrt(v_hat) + hyper.eps)
                p_i += 1
        log.append(EpochStats(epoch=len(log) + 1, loss=loss_sum / n, accuracy=correct / n, lr=lr))
    return TrainedModel(
        config=model.config,
        weights=tuple(None if s is None else (s[0], s[1]) for s in weights),
        training_log=tuple(log),
        label_map=dict(model.label_map),
    )


def predict(model: TrainedModel, images: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Argmax category per image; evaluation is chunked with a fixed chunk size."""
    out = np.empty(len(images), dtype=np.intp)
    for start in range(0, len(images), chunk):
        out[start : start + chunk] = np.argmax(forward(model, images[start : start + chunk]), axis=1)
    return out


@dataclass(frozen=True)
class GroupAccuracy:
    group: str
    count: int
    correct: int
    accuracy: float | None  # None marks an empty group


@dataclass(frozen=True)
class GroupAccuracyTable:
    overall: GroupAccuracy
    groups: tuple[GroupAccuracy, ...]

    def by_group(self, name: str) -> GroupAccuracy:
        for g in self.groups:
            if g.group == name:
                return g
        raise KeyError(name)


def evaluate_by_group(model: TrainedModel, samples, group_by: str = "group",
                      expected_groups: Sequence[str] = ()) -> GroupAccuracyTable:
    """Overall and per-subgroup accuracy with counts.

    ``expected_groups`` adds rows (count 0, accuracy None) for groups absent
    from the sample set.
    """
    images, labels = _sample_arrays(samples)
    preds = predict(model, images)
    hits = preds == labels
    names = [str(s.attributes[group_by]) for s in samples]
    group_order = sorted(set(names) | set(str(g) for g in expected_groups))
    rows = []
    for g in group_order:
        members = [i for i, nm in enumerate(names) if nm == g]
        count = len(members)
        correct = int(np.sum(hits[members])) if members else 0
        rows.append(GroupAccuracy(g, count, correct, correct / count if count else None))
    overall = GroupAccuracy("overall", len(samples), int(hits.sum()), float(hits.mean()))
    return GroupAccuracyTable(overall=overall, groups=tuple(rows))


# ---------------------------------------------------------------------------
# Checkpoints: "CKPT v1" text metadata + raw little-endian float64 payload.
# ---------------------------------------------------------------------------

_CKPT_MAGIC = "CKPT v1"
_PAYLOAD_SENTINEL = "PAYLOAD"


def _layer_to_str(spec: LayerSpec) -> str:
    if spec.kind == "conv":
        return f"conv({spec.out_channels},{spec.kernel_size},{spec.stride},{spec.padding})"
    if spec.kind == "maxpool":
        return f"maxpool({spec.window})"
    if spec.kind == "dense":
        return f"dense({spec.out_features})"
    return "relu"


def _layer_from_str(text: str) -> LayerSpec:
    text = text.strip()
    if text == "relu":
        return relu()
    kind, _, args = text.partition("(")
    nums = [int(v) for v in args.rstrip(")").split(",")] if args else []
    if kind == "conv":
        return LayerSpec("conv", out_channels=nums[0], kernel_size=nums[1], stride=nums[2], padding=nums[3])
    if kind == "maxpool":
        return maxpool(nums[0])
    if kind == "dense":
        return dense(nums[0])
    raise ConfigurationError(f"cannot parse layer {text!r}")


def save_checkpoint(model: TrainedModel, path) -> None:
    cfg = model.config
    lines = [
        _CKPT_MAGIC,
        "[config]",
        "layers = " + " | ".join(_layer_to_str(s) for s in cfg.layers),
        "input_dims = " + ",".join(str(d) for d in cfg.input_dims),
        f"num_categories = {cfg.num_categories}",
        f"flks = {'none' if cfg.flks is None else cfg.flks}",
        f"init_variance = {cfg.init_variance!r}",
        f"seed = {cfg.seed}",
        "[label_map]",
    ]
    for idx in sorted(model.label_map):
        lines.append(f"{idx} = {model.label_map[idx]}")
    lines.append("[training_log]")
    for e in model.training_log:
        lines.append(f"{e.epoch} = {e.loss!r},{e.accuracy!r},{e.lr!r}")
    lines.append(_PAYLOAD_SENTINEL)
    payload = b"".join(
        arr.astype("<f8").tobytes() for slot in model.weights if slot is not None for arr in slot
    )
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        fh.write(payload)


def load_checkpoint(path) -> TrainedModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    sentinel = (_PAYLOAD_SENTINEL + "\n").encode("utf-8")
    head, _, payload = blob.partition(sentinel)
    text = head.decode("utf-8").splitlines()
    if not text or text[0] != _CKPT_MAGIC:
        raise ConfigurationError(f"{path}: not a {_CKPT_MAGIC} checkpoint")
    section = None
    kv: dict[str, str] = {}
    label_map: dict[int, str] = {}
    log: list[EpochStats] = []
    for line in text[1:]:
        line = line.strip()
        if not line:
            continue
        if line.startswith("["):
            section = line.strip("[]")
            continue
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if section == "config":
            kv[key] = value
        elif section == "label_map":
            label_map[int(key)] = value
        elif section == "training_log":
            loss, acc, lr = (float(v) for v in value.split(","))
            log.append(EpochStats(epoch=int(key), loss=loss, accuracy=acc, lr=lr))
    config = ModelConfig(
        layers=tuple(_layer_from_str(t) for t in kv["layers"].split("|")),
        input_dims=tuple(int(v) for v in kv["input_dims"].split(",")),
        num_categories=int(kv["num_categories"]),
        flks=None if kv["flks"] == "none" else int(kv["flks"]),
        init_variance=float(kv["init_variance"]),
        seed=int(kv["seed"]),
    )
    weights = []
    offset = 0
    for shapes in config.param_shapes():
        if shapes is None:
            weights.append(None)
            continue
        pair = []
        for shape in shapes:
            count = int(np.prod(shape))
            arr = np.frombuffer(payload, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
            offset += 8 * count
            pair.append(arr)
        weights.append((pair[0], pair[1]))
    if offset != len(payload):
        raise ConfigurationError(f"{path}: payload size mismatch")
    return TrainedModel(config=config, weights=tuple(weights), training_log=tuple(log), label_map=label_map)
