"""The small residual CNN whose convolution weights are being represented.

Besides the network itself this module holds the weight atlas (the ordered
list of conv kernels), the labeled dataset container with its binary file
format, a synthetic blob task, target training, evaluation and the FGSM /
I-FGSM attacks.
"""
from __future__ import annotations

import copy
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .numerics import (Adam, NonFiniteError, Tensor, backward, conv2d, cross_entropy,
                       global_avg_pool)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


# --------------------------------------------------------------------------- spec


@dataclass(frozen=True)
class ConvLayer:
    in_channels: int
    out_channels: int
    k: int
    stride: int = 1
    block: int | None = None
    role: str = "plain"  # plain | conv1 | conv2 | shortcut

    @property
    def shape(self):
        return (self.out_channels, self.in_channels, self.k, self.k)

    @property
    def size(self):
        return self.out_channels * self.in_channels * self.k * self.k


@dataclass(frozen=True)
class ConvSpec:
    layers: tuple
    num_classes: int = 10
    in_channels: int = 1
    k_max: int = 3

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(
            lyr if isinstance(lyr, ConvLayer) else ConvLayer(**lyr) for lyr in self.layers))
        self.validate()

    def validate(self):
        if not self.layers:
            raise ValueError("spec has no conv layers")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        for i, lyr in enumerate(self.layers):
            if lyr.k % 2 == 0 or lyr.k > self.k_max or lyr.k < 1:
                raise ValueError(f"layer {i}: kernel size {lyr.k} must be odd and <= k_max={self.k_max}")
            if lyr.stride < 1 or lyr.in_channels < 1 or lyr.out_channels < 1:
                raise ValueError(f"layer {i}: non-positive extent")
        for unit in self.units():
            if unit[0] == "plain":
                continue
            _, conv1, conv2, short = unit
            a, b = self.layers[conv1], self.layers[conv2]
            if a.out_channels != b.in_channels or b.stride != 1:
                raise ValueError(f"block at layer {conv1}: inconsistent conv1/conv2")
            if short is None:
                if a.in_channels != b.out_channels or a.stride != 1:
                    raise ValueError(f"block at layer {conv1}: identity shortcut needs matching shapes")
            else:
                s = self.layers[short]
                if (s.in_channels, s.out_channels, s.stride) != (a.in_channels, b.out_channels, a.stride):
                    raise ValueError(f"block at layer {conv1}: shortcut does not match block")
        channels = self.in_channels
        for unit in self.units():
            first = self.layers[unit[1]]
            if first.in_channels != channels:
                raise ValueError(f"layer {unit[1]} expects {first.in_channels} channels, gets {channels}")
            channels = self.layers[unit[1] if unit[0] == "plain" else unit[2]].out_channels

    def units(self):
        """Forward plan: ("plain", i) or ("block", conv1, conv2, shortcut-or-None)."""
        plan, i = [], 0
        while i < len(self.layers):
            lyr = self.layers[i]
            if lyr.block is None:
                plan.append(("plain", i))
                i += 1
                continue
            members = [j for j in range(i, len(self.layers)) if self.layers[j].block == lyr.block]
            roles = {self.layers[j].role: j for j in members}
            if "conv1" not in roles or "conv2" not in roles:
                raise ValueError(f"block {lyr.block} needs conv1 and conv2 layers")
            plan.append(("block", roles["conv1"], roles["conv2"], roles.get("shortcut")))
            i = max(members) + 1
        return plan

    @property
    def head_width(self):
        last = self.units()[-1]
        return self.layers[last[1] if last[0] == "plain" else last[2]].out_channels

    @property
    def total_weights(self):
        return sum(lyr.size for lyr in self.layers)

    def to_json(self):
        return json.dumps({"layers": [asdict(lyr) for lyr in self.layers], "num_classes": self.num_classes,
                           "in_channels": self.in_channels, "k_max": self.k_max}, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(tuple(ConvLayer(**lyr) for lyr in d["layers"]), d["num_classes"],
                   d["in_channels"], d["k_max"])

    @classmethod
    def sequential(cls, shapes, num_classes=10, in_channels=None, k_max=3):
        """Plain conv stack from (out, in, k) triples."""
        layers = tuple(ConvLayer(c_in, c_out, k) for c_out, c_in, k in shapes)
        return cls(layers, num_classes, in_channels or layers[0].in_channels, k_max)

    @classmethod
    def residual(cls, widths=(8, 16, 32), in_channels=1, num_classes=10, k=3, k_max=3):
        """Stem conv followed by one residual block per stage; stages after the first downsample."""
        layers = [ConvLayer(in_channels, widths[0], k)]
        prev = widths[0]
        for b, w in enumerate(widths):
            stride = 1 if b == 0 else 2
            layers.append(ConvLayer(prev, w, k, stride, b, "conv1"))
            layers.append(ConvLayer(w, w, k, 1, b, "conv2"))
            if stride != 1 or prev != w:
                layers.append(ConvLayer(prev, w, 1, stride, b, "shortcut"))
            prev = w
        return cls(tuple(layers), num_classes, in_channels, k_max)


PRESETS = {
    "tiny": dict(widths=(4, 8, 16)),
    "small": dict(widths=(6, 12, 24)),
    "base": dict(widths=(8, 16, 32)),
    "wide": dict(widths=(16, 32, 64)),
}


def preset_spec(name, **kw):
    try:
        params = dict(PRESETS[name])
    except KeyError:
        raise ValueError(f"unknown spec preset {name!r}; choose from {sorted(PRESETS)}") from None
    params.update(kw)
    return ConvSpec.residual(**params)


# --------------------------------------------------------------------------- atlas


@dataclass
class WeightAtlas:
    """Ordered conv weights ``[(layer_id, array[F, C, k, k]), ...]``."""

    layers: list

    def __post_init__(self):
        ids = [lid for lid, _ in self.layers]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate layer ids in atlas")
        self.layers = [(lid, np.asarray(w, dtype=np.float32)) for lid, w in self.layers]

    @property
    def total_size(self):
        return int(sum(w.size for _, w in self.layers))

    @property
    def shapes(self):
        return [w.shape for _, w in self.layers]

    @property
    def ids(self):
        return [lid for lid, _ in self.layers]

    def __len__(self):
        return len(self.layers)

    def __iter__(self):
        return iter(self.layers)

    def __getitem__(self, i):
        return self.layers[i][1]

    def flat(self):
        return np.concatenate([w.ravel() for _, w in self.layers])

    def map(self, fn):
        return WeightAtlas([(lid, fn(w)) for lid, w in self.layers])

    def check_compatible(self, other):
        if self.shapes != other.shapes:
            raise ValueError(f"atlas shapes differ: {self.shapes} vs {other.shapes}")

    def copy(self):
        return WeightAtlas([(lid, w.copy()) for lid, w in self.layers])


def blend(a, b, alpha):
    """Convex combination ``(1 - alpha) * a + alpha * b`` of two atlases."""
    a.check_compatible(b)
    return WeightAtlas([(lid, ((1.0 - alpha) * wa.astype(np.float64) + alpha * wb).astype(np.float32))
                        for (lid, wa), (_, wb) in zip(a, b)])


# --------------------------------------------------------------------------- data


@dataclass
class LabeledDataset:
    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) == 0:
            raise ValueError(f"images must be a non-empty [N, C, H, W] array, got {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise ValueError("images and labels differ in length")
        if self.images.min() < -1.0 or self.images.max() > 1.0:
            raise ValueError("image values must lie in [-1, 1]")
        if self.labels.min() < 0:
            raise ValueError("labels must be non-negative")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        return LabeledDataset(self.images[idx], self.labels[idx])

    def batches(self, size, rng=None):
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for start in range(0, len(self), size):
            idx = order[start:start + size]
            yield self.images[idx], self.labels[idx]


DATASET_MAGIC = b"NWDS"
DATASET_VERSION = 1


def save_dataset(path, data):
    n, c, h, w = data.images.shape
    if data.labels.max() > 0xFFFF:
        raise ValueError("labels do not fit in u16")
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<5I", DATASET_VERSION, n, c, h, w))
        fh.write(data.images.astype("<f4").tobytes())
        fh.write(data.labels.astype("<u2").tobytes())


def load_dataset(path):
    raw = Path(path).read_bytes()
    if raw[:4] != DATASET_MAGIC:
        raise ValueError(f"{path}: not a dataset file (bad magic)")
    if len(raw) < 24:
        raise ValueError(f"{path}: truncated header")
    version, n, c, h, w = struct.unpack_from("<5I", raw, 4)
    if version != DATASET_VERSION:
        raise ValueError(f"{path}: unsupported dataset version {version}")
    count = n * c * h * w
    need = 24 + 4 * count + 2 * n
    if len(raw) != need:
        raise ValueError(f"{path}: expected {need} bytes, found {len(raw)}")
    images = np.frombuffer(raw, "<f4", count, 24).reshape(n, c, h, w).astype(np.float32)
    labels = np.frombuffer(raw, "<u2", n, 24 + 4 * count).astype(np.int64)
    return LabeledDataset(images, labels)


@dataclass(frozen=True)
class BlobTask:
    """Images made of Gaussian blobs whose layout identifies the class.

    ``task_seed`` fixes the per-class blob layouts; sampling seeds only
    control jitter, gain and pixel noise, so splits drawn with different
    seeds share one labeling rule.
    """

    num_classes: int = 10
    size: int = 16
    blobs_per_class: int = 4
    blob_width: float = 1.6
    blob_amplitude: float = 0.9
    jitter: float = 2.5
    noise: float = 0.7
    task_seed: int = 0

    def templates(self):
        rng = np.random.default_rng(self.task_seed)
        t = []
        for _ in range(self.num_classes):
            centers = rng.uniform(3.0, self.size - 4.0, size=(self.blobs_per_class, 2))
            t.append((centers, np.full(self.blobs_per_class, self.blob_width),
                      np.full(self.blobs_per_class, self.blob_amplitude)))
        return t

    def sample(self, n, seed):
        rng = np.random.default_rng(seed)
        templates = self.templates()
        labels = np.arange(n) % self.num_classes
        labels = rng.permutation(labels)
        yy, xx = np.mgrid[0:self.size, 0:self.size].astype(np.float64)
        images = np.empty((n, 1, self.size, self.size), dtype=np.float32)
        for i, y in enumerate(labels):
            centers, widths, amps = templates[y]
            shift = rng.uniform(-self.jitter, self.jitter, size=2)
            gain = rng.uniform(0.7, 1.3)
            img = np.zeros((self.size, self.size))
            for (cy, cx), s, a in zip(centers + shift, widths, amps):
                img += a * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
            img = gain * img + rng.normal(0.0, self.noise, img.shape)
            images[i, 0] = np.clip(img, -1.0, 1.0)
        return LabeledDataset(images, labels)

    def splits(self, n_train=2000, n_val=1000, n_test=2000, seed=0):
        base = 1_000_003 * seed
        return (self.sample(n_train, base + 1), self.sample(n_val, base + 2), self.sample(n_test, base + 3))


# --------------------------------------------------------------------------- network


@dataclass
class TargetNetwork:
    spec: ConvSpec
    conv: list
    bn_scale: list
    bn_shift: list
    bn_mean: list
    bn_var: list
    fc_weight: np.ndarray
    fc_bias: np.ndarray
    meta: dict = field(default_factory=dict)

    def clone(self):
        return copy.deepcopy(self)

    def forward(self, x, conv_weights=None, train=False, trace=False, params=None,
                bn_momentum=BN_MOMENTUM):
        """Logits for a batch ``x``.

        ``conv_weights`` overrides the stored kernels (tensors or arrays, for
        differentiating through reconstructed weights). ``params`` supplies
        tensors for the trainable non-conv parameters during target training;
        batch statistics are then used and running statistics updated.
        """
        x = x if isinstance(x, Tensor) else Tensor(x)
        weights = conv_weights if conv_weights is not None else (
            params["conv"] if params is not None else self.conv)
        weights = [w if isinstance(w, Tensor) else Tensor(w) for w in weights]
        if len(weights) != len(self.spec.layers):
            raise ValueError(f"expected {len(self.spec.layers)} conv tensors, got {len(weights)}")
        for w, lyr in zip(weights, self.spec.layers):
            if w.shape != lyr.shape:
                raise ValueError(f"conv weight shape {w.shape} does not match spec {lyr.shape}")

        def conv_bn(h, i):
            lyr = self.spec.layers[i]
            h = conv2d(h, weights[i], lyr.stride, lyr.k // 2)
            if train:
                mean = h.mean(axis=(0, 2, 3), keepdims=True)
                centered = h - mean
                var = (centered * centered).mean(axis=(0, 2, 3), keepdims=True)
                h = centered / (var + BN_EPS).sqrt()
                m = bn_momentum
                count = h.shape[0] * h.shape[2] * h.shape[3]
                self.bn_mean[i] = ((1 - m) * self.bn_mean[i] + m * mean.data.ravel()).astype(np.float32)
                unbiased = var.data.ravel() * count / max(count - 1, 1)
                self.bn_var[i] = ((1 - m) * self.bn_var[i] + m * unbiased).astype(np.float32)
                gamma = params["bn_scale"][i].reshape(1, -1, 1, 1)
                beta = params["bn_shift"][i].reshape(1, -1, 1, 1)
                return h * gamma + beta
            a = self.bn_scale[i] / np.sqrt(self.bn_var[i] + BN_EPS)
            b = self.bn_shift[i] - self.bn_mean[i] * a
            return h * a.reshape(1, -1, 1, 1) + b.reshape(1, -1, 1, 1)

        units = self.spec.units()
        record_plain = not any(u[0] == "block" for u in units)
        acts = []
        h = x
        for unit in units:
            if unit[0] == "plain":
                h = conv_bn(h, unit[1]).relu()
            else:
                _, c1, c2, sc = unit
                out = conv_bn(conv_bn(h, c1).relu(), c2)
                skip = h if sc is None else conv_bn(h, sc)
                h = (out + skip).relu()
            if unit[0] == "block" or record_plain:
                acts.append(h)
        pooled = global_avg_pool(h)
        if params is not None:
            logits = pooled @ params["fc_weight"] + params["fc_bias"]
        else:
            logits = pooled @ Tensor(self.fc_weight) + Tensor(self.fc_bias)
        if trace:
            return logits, ActivationTrace(acts, logits)
        return logits

    def logits(self, images, batch_size=500):
        return np.concatenate([
            self.forward(images[s:s + batch_size]).data for s in range(0, len(images), batch_size)
        ])

    def predict(self, images):
        return self.logits(images).argmax(axis=1)


@dataclass
class ActivationTrace:
    """Per-block feature maps and output logits of one minibatch."""

    maps: list
    logits: Tensor


def build_target(spec, seed):
    spec.validate()
    rng = np.random.default_rng(seed)
    conv = []
    for lyr in spec.layers:
        fan_in = lyr.in_channels * lyr.k * lyr.k
        bound = np.sqrt(6.0 / fan_in)
        conv.append(rng.uniform(-bound, bound, size=lyr.shape).astype(np.float32))
    n = len(spec.layers)
    chans = [lyr.out_channels for lyr in spec.layers]
    bound = 1.0 / np.sqrt(spec.head_width)
    return TargetNetwork(
        spec,
        conv,
        [np.ones(c, np.float32) for c in chans],
        [np.zeros(c, np.float32) for c in chans],
        [np.zeros(c, np.float32) for c in chans],
        [np.ones(c, np.float32) for c in chans],
        rng.uniform(-bound, bound, size=(spec.head_width, spec.num_classes)).astype(np.float32),
        np.zeros(spec.num_classes, np.float32),
        {"seed": seed, "layers": n},
    )


def extract_weights(net):
    return WeightAtlas([(i, w.copy()) for i, w in enumerate(net.conv)])


def inject_weights(net, atlas):
    """Copy of ``net`` with its conv kernels replaced; everything else is shared verbatim."""
    shapes = [lyr.shape for lyr in net.spec.layers]
    if list(atlas.shapes) != shapes:
        raise ValueError(f"atlas shapes {atlas.shapes} do not match network {shapes}")
    out = net.clone()
    out.conv = [np.array(w, dtype=np.float32, copy=True) for _, w in atlas]
    return out


def recalibrate_norm(net, data, batch_size=250):
    """Recompute normalization running statistics from ``data`` (off by default).

    Runs batch-statistics forward passes and keeps a cumulative average, so
    the result does not depend on a momentum constant.
    """
    out = net.clone()
    for i in range(len(out.spec.layers)):
        out.bn_mean[i] = np.zeros_like(out.bn_mean[i])
        out.bn_var[i] = np.zeros_like(out.bn_var[i])
    params = {
        "conv": [Tensor(w) for w in out.conv],
        "bn_scale": [Tensor(s) for s in out.bn_scale],
        "bn_shift": [Tensor(s) for s in out.bn_shift],
        "fc_weight": Tensor(out.fc_weight),
        "fc_bias": Tensor(out.fc_bias),
    }
    for t, start in enumerate(range(0, len(data), batch_size)):
        out.forward(data.images[start:start + batch_size], train=True, params=params,
                    bn_momentum=1.0 / (t + 1))
    return out


# --------------------------------------------------------------------------- training


@dataclass
class TargetTrainConfig:
    lr: float = 1e-2
    batch_size: int = 64
    seed: int = 0
    lr_decay: bool = True
    augment_shift: int = 0
    augment_noise: float = 0.0


def random_shift(images, max_shift, rng):
    """Translate each image by up to ``max_shift`` pixels, filling with zeros."""
    n, _, h, w = images.shape
    m = max_shift
    padded = np.pad(images, ((0, 0), (0, 0), (m, m), (m, m)))
    dy = rng.integers(-m, m + 1, size=n)
    dx = rng.integers(-m, m + 1, size=n)
    out = np.empty_like(images)
    for i in range(n):
        out[i] = padded[i, :, m + dy[i]:m + dy[i] + h, m + dx[i]:m + dx[i] + w]
    return out


def _param_tensors(net):
    return {
        "conv": [Tensor(w, requires_grad=True) for w in net.conv],
        "bn_scale": [Tensor(s, requires_grad=True) for s in net.bn_scale],
        "bn_shift": [Tensor(s, requires_grad=True) for s in net.bn_shift],
        "fc_weight": Tensor(net.fc_weight, requires_grad=True),
        "fc_bias": Tensor(net.fc_bias, requires_grad=True),
    }


def _flatten(params):
    return params["conv"] + params["bn_scale"] + params["bn_shift"] + [params["fc_weight"], params["fc_bias"]]


def train_target(net, data, epochs, config=None):
    """Train a copy of ``net`` with cross-entropy; returns ``(net, history)``.

    History rows hold the epoch index, mean training loss and training
    accuracy measured on the fly.
    """
    config = config or TargetTrainConfig()
    if len(data) == 0:
        raise ValueError("empty dataset")
    net = net.clone()
    if epochs <= 0:
        return net, []
    params = _param_tensors(net)
    flat = _flatten(params)
    opt = Adam(flat, lr=config.lr)
    rng = np.random.default_rng(config.seed)
    history = []
    steps_per_epoch = -(-len(data) // config.batch_size)
    total_steps = epochs * steps_per_epoch
    step = 0
    for epoch in range(epochs):
        losses, correct = [], 0
        for xb, yb in data.batches(config.batch_size, rng):
            if config.lr_decay:
                opt.state.lr = config.lr * 0.5 * (1 + np.cos(np.pi * step / total_steps))
            if config.augment_shift:
                xb = random_shift(xb, config.augment_shift, rng)
            if config.augment_noise:
                xb = np.clip(xb + rng.normal(0.0, config.augment_noise, xb.shape), -1, 1).astype(np.float32)
            opt.zero_grad()
            logits = net.forward(xb, train=True, params=params)
            loss = cross_entropy(logits, yb)
            if not np.isfinite(loss.item()):
                raise NonFiniteError("target training diverged")
            backward(loss)
            opt.step()
            step += 1
            losses.append(loss.item())
            correct += int((logits.data.argmax(1) == yb).sum())
        history.append({"epoch": epoch + 1, "loss": float(np.mean(losses)),
                        "accuracy": correct / len(data)})
    net.conv = [p.data.copy() for p in params["conv"]]
    net.bn_scale = [p.data.copy() for p in params["bn_scale"]]
    net.bn_shift = [p.data.copy() for p in params["bn_shift"]]
    net.fc_weight = params["fc_weight"].data.copy()
    net.fc_bias = params["fc_bias"].data.copy()
    return net, history


def accuracy_from_logits(logits, labels):
    return float(np.mean(np.asarray(logits).argmax(axis=1) == np.asarray(labels)))


def evaluate(net, data):
    """Fraction of samples whose argmax logit equals the label."""
    if len(data) == 0:
        raise ValueError("empty dataset")
    correct = int((net.predict(data.images) == data.labels).sum())
    return correct / len(data)


def mean_loss(net, data, batch_size=500):
    total = 0.0
    for s in range(0, len(data), batch_size):
        xb, yb = data.images[s:s + batch_size], data.labels[s:s + batch_size]
        total += cross_entropy(net.forward(xb), yb).item() * len(yb)
    return total / len(data)


# --------------------------------------------------------------------------- attacks


def input_gradient(net, images, labels):
    x = Tensor(images, requires_grad=True)
    loss = cross_entropy(net.forward(x), labels) * float(len(labels))
    backward(loss)
    return x.grad


def fgsm(net, data, epsilon, batch_size=500):
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    if epsilon == 0:
        return LabeledDataset(data.images.copy(), data.labels.copy())
    out = np.empty_like(data.images)
    for s in range(0, len(data), batch_size):
        x, y = data.images[s:s + batch_size], data.labels[s:s + batch_size]
        g = input_gradient(net, x, y)
        out[s:s + batch_size] = np.clip(x + epsilon * np.sign(g), -1.0, 1.0)
    return LabeledDataset(out, data.labels.copy())


def ifgsm(net, data, epsilon, steps=10, step_size=None, batch_size=500):
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    step_size = epsilon / 4 if step_size is None else step_size
    if epsilon == 0 or steps == 0:
        return LabeledDataset(data.images.copy(), data.labels.copy())
    out = np.empty_like(data.images)
    for s in range(0, len(data), batch_size):
        x0, y = data.images[s:s + batch_size], data.labels[s:s + batch_size]
        x = x0.copy()
        for _ in range(steps):
            g = input_gradient(net, x, y)
            x = x + step_size * np.sign(g)
            x = np.clip(np.clip(x, x0 - epsilon, x0 + epsilon), -1.0, 1.0).astype(np.float32)
        out[s:s + batch_size] = x
    return LabeledDataset(out, data.labels.copy())
