"""Coordinate-to-kernel predictor.

Each conv kernel is addressed by ``(layer, filter, channel)``. Coordinates
are normalized per layer, lifted with Fourier features and fed through a
five-layer MLP that emits a ``k_max x k_max`` kernel; smaller kernels are
cut from the center.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import Tensor, take_rows
from .target_net import WeightAtlas

N_AFFINE = 5


@dataclass(frozen=True)
class KernelCoordinate:
    layer: int
    filter: int
    channel: int


@dataclass(frozen=True)
class EncodingConfig:
    """Fourier-feature settings plus the coordinate extents used for normalization.

    ``extents`` holds one ``(filters, channels)`` pair per layer.
    """

    extents: tuple
    num_frequencies: int = 8
    base: float = 1.25

    def __post_init__(self):
        if self.num_frequencies < 1:
            raise ValueError("num_frequencies must be positive")
        if self.base <= 0:
            raise ValueError("base frequency must be positive")
        object.__setattr__(self, "extents", tuple((int(f), int(c)) for f, c in self.extents))

    @classmethod
    def for_spec(cls, spec, num_frequencies=8, base=1.25):
        return cls(tuple((lyr.out_channels, lyr.in_channels) for lyr in spec.layers), num_frequencies, base)

    @property
    def dim(self):
        return 3 * 2 * self.num_frequencies

    @property
    def num_layers(self):
        return len(self.extents)


def _unit(index, extent):
    return index / (extent - 1) if extent > 1 else np.zeros_like(index, dtype=np.float64)


def encode_coordinates(coords, cfg):
    """Encode an ``[n, 3]`` integer array of (layer, filter, channel) rows."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    layer, filt, chan = coords.T
    if len(coords):
        if layer.min() < 0 or layer.max() >= cfg.num_layers:
            raise IndexError("layer index out of range")
        ext = np.asarray(cfg.extents)[layer]
        if (filt < 0).any() or (filt >= ext[:, 0]).any() or (chan < 0).any() or (chan >= ext[:, 1]).any():
            raise IndexError("filter or channel index out of range")
    else:
        ext = np.zeros((0, 2), dtype=np.int64)
    t = np.stack([
        _unit(layer.astype(np.float64), cfg.num_layers) * np.ones(len(coords)),
        np.where(ext[:, 0] > 1, filt / np.maximum(ext[:, 0] - 1, 1), 0.0),
        np.where(ext[:, 1] > 1, chan / np.maximum(ext[:, 1] - 1, 1), 0.0),
    ], axis=1)
    freqs = 2.0 * np.pi * cfg.base ** np.arange(cfg.num_frequencies)
    phase = t[:, :, None] * freqs  # [n, 3, nf]
    enc = np.concatenate([np.sin(phase), np.cos(phase)], axis=2)  # per axis: sins then cosines
    return enc.reshape(len(coords), cfg.dim)


def encode_coordinate(coord, cfg):
    return encode_coordinates([[coord.layer, coord.filter, coord.channel]], cfg)[0]


# --------------------------------------------------------------------------- network


@dataclass
class PredictorNet:
    """Five affine layers mapping an encoded coordinate to a flattened kernel."""

    weights: list
    biases: list
    encoding: EncodingConfig
    k_max: int
    activation: str = "sine"
    first_omega: float = 30.0
    hidden_omega: float = 1.0
    layer_scales: np.ndarray = field(default_factory=lambda: np.zeros(0, np.float32))

    def __post_init__(self):
        if len(self.weights) != N_AFFINE or len(self.biases) != N_AFFINE:
            raise ValueError(f"predictor must have exactly {N_AFFINE} affine layers")
        self.weights = [w if isinstance(w, Tensor) else Tensor(w, requires_grad=True) for w in self.weights]
        self.biases = [b if isinstance(b, Tensor) else Tensor(b, requires_grad=True) for b in self.biases]
        if self.weights[0].shape[0] != self.encoding.dim:
            raise ValueError("first layer input size must equal the encoded dimension")
        if self.weights[-1].shape[1] != self.k_max ** 2:
            raise ValueError("last layer must emit k_max**2 values")
        self.layer_scales = np.asarray(self.layer_scales, dtype=np.float32)

    @property
    def hidden(self):
        return self.weights[0].shape[1]

    def parameters(self):
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    @property
    def num_parameters(self):
        return int(sum(p.size for p in self.parameters()))

    def scales(self):
        if len(self.layer_scales) == self.encoding.num_layers:
            return self.layer_scales
        return np.ones(self.encoding.num_layers, np.float32)

    def forward(self, encoded):
        h = encoded if isinstance(encoded, Tensor) else Tensor(encoded)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i == N_AFFINE - 1:
                break
            if self.activation == "sine":
                h = (h * (self.first_omega if i == 0 else self.hidden_omega)).sin()
            else:
                h = h.relu()
        return h

    def copy(self):
        return PredictorNet([w.data.copy() for w in self.weights], [b.data.copy() for b in self.biases],
                            self.encoding, self.k_max, self.activation, self.first_omega,
                            self.hidden_omega, self.layer_scales.copy())

    def zero_output(self):
        """Copy whose last affine layer is all zeros."""
        out = self.copy()
        out.weights[-1] = Tensor(np.zeros_like(out.weights[-1].data), requires_grad=True)
        out.biases[-1] = Tensor(np.zeros_like(out.biases[-1].data), requires_grad=True)
        return out


def init_predictor(encoding, k_max, hidden=64, seed=0, activation="sine", first_omega=30.0,
                   hidden_omega=1.0):
    if hidden < 1:
        raise ValueError("hidden size must be >= 1")
    if activation not in ("sine", "relu"):
        raise ValueError(f"unknown activation {activation!r}")
    rng = np.random.default_rng(seed)
    dims = [encoding.dim] + [hidden] * (N_AFFINE - 1) + [k_max ** 2]
    weights, biases = [], []
    for i in range(N_AFFINE):
        n_in, n_out = dims[i], dims[i + 1]
        if activation == "sine":
            bound = 1.0 / n_in if i == 0 else np.sqrt(6.0 / n_in) / hidden_omega
        else:
            bound = np.sqrt(6.0 / n_in)
        weights.append(rng.uniform(-bound, bound, size=(n_in, n_out)).astype(np.float32))
        biases.append(rng.uniform(-1.0 / np.sqrt(n_in), 1.0 / np.sqrt(n_in), size=n_out).astype(np.float32))
    return PredictorNet(weights, biases, encoding, k_max, activation, first_omega, hidden_omega)


def parameter_count(encoded_dim, hidden, k_max):
    k2 = k_max * k_max
    return (encoded_dim * hidden + hidden) + 3 * (hidden * hidden + hidden) + (hidden * k2 + k2)


def hidden_for_ratio(target_ratio, encoded_dim, k_max, total_weights):
    """Hidden size whose compression ratio is closest to ``target_ratio``."""
    best, best_err = 1, float("inf")
    h = 1
    while True:
        ratio = parameter_count(encoded_dim, h, k_max) / total_weights
        err = abs(ratio - target_ratio)
        if err < best_err:
            best, best_err = h, err
        if ratio > target_ratio:
            return best
        h += 1


# --------------------------------------------------------------------------- kernels


def crop_center(full, k):
    """Central ``k x k`` window of the trailing two axes."""
    k_max = full.shape[-1]
    if full.shape[-2] != k_max:
        raise ValueError("kernel must be square")
    if k > k_max or k < 1 or (k_max - k) % 2:
        raise ValueError(f"cannot crop {k}x{k} from the middle of {k_max}x{k_max}")
    o = (k_max - k) // 2
    return full[..., o:o + k, o:o + k]


def predict_kernel(net, coord):
    enc = encode_coordinate(coord, net.encoding)
    out = net.forward(enc[None, :]).data[0] * net.scales()[coord.layer]
    return out.reshape(net.k_max, net.k_max)


@dataclass
class CoordinateTable:
    """Pre-encoded coordinates of every kernel slot in predictor (permuted) order."""

    encoded: np.ndarray
    offsets: list
    kernel_sizes: list
    inverse: list
    shapes: list
    ids: list

    @classmethod
    def build(cls, encoding, shapes, perm=None, ids=None):
        rows, offsets, sizes, inverse = [], [0], [], []
        for layer, shape in enumerate(shapes):
            f, c, k, _ = shape
            n = f * c
            pos = np.arange(n)
            rows.append(np.stack([np.full(n, layer), pos // c, pos % c], axis=1))
            offsets.append(offsets[-1] + n)
            sizes.append(k)
            order = np.arange(n) if perm is None else perm.order(layer)
            inverse.append(np.argsort(order, kind="stable"))
        coords = np.concatenate(rows) if rows else np.zeros((0, 3), np.int64)
        return cls(encode_coordinates(coords, encoding).astype(np.float32), offsets, sizes, inverse,
                   [tuple(s) for s in shapes], list(ids if ids is not None else range(len(shapes))))

    def coordinates(self, layer):
        f, c = self.shapes[layer][:2]
        pos = np.arange(f * c)
        return np.stack([np.full(f * c, layer), pos // c, pos % c], axis=1)


def predict_layers(net, table):
    """Reconstructed conv tensors in original layout, as differentiable tensors."""
    raw = net.forward(table.encoded)
    scales = net.scales()
    out = []
    for layer, shape in enumerate(table.shapes):
        lo, hi = table.offsets[layer], table.offsets[layer + 1]
        k = table.kernel_sizes[layer]
        rows = raw[lo:hi]
        if k != net.k_max:
            rows = crop_center(rows.reshape(hi - lo, net.k_max, net.k_max), k).reshape(hi - lo, k * k)
        rows = take_rows(rows, table.inverse[layer]) * float(scales[layer])
        out.append(rows.reshape(shape))
    return out


def reconstruct_atlas(net, spec, perm=None):
    """Predict every kernel of ``spec`` and restore the original kernel order."""
    shapes = [lyr.shape for lyr in spec.layers]
    table = CoordinateTable.build(net.encoding, shapes, perm)
    return WeightAtlas([(i, t.data) for i, t in enumerate(predict_layers(net, table))])


def layer_scales(atlas):
    """Per-layer weight standard deviation, used as a fixed output multiplier."""
    return np.array([max(float(np.std(w)), 1e-8) for _, w in atlas], dtype=np.float32)


# --------------------------------------------------------------------------- compression


@dataclass(frozen=True)
class CompressionReport:
    predictor_params: int
    original_params: int

    @property
    def ratio(self):
        return self.predictor_params / self.original_params

    @property
    def percent(self):
        return self.ratio * 100.0


def compression_ratio(net, atlas):
    q = net if isinstance(net, int) else net.num_parameters
    p = atlas if isinstance(atlas, int) else atlas.total_size
    return CompressionReport(q, p)
