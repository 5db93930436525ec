"""Objectives and schedules for fitting a predictor to a target network.

Three regimes are supported:

* reconstruction only (``fit_recon_only``),
* the combined objective ``recon + alpha * kd + beta * fmd`` (``fit_baseline``),
* a second, distillation-only phase on top of a fitted predictor
  (``distill_phase``), driven by real data or uniform noise and by the
  original network or any other teacher with the same class count.

``progressive_reconstruct`` chains reconstruction-only rounds, each round
targeting the best network of the previous one.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .numerics import Adam, NonFiniteError, Tensor, backward, kl_divergence, l2_norm, sample_norms
from .numerics.tensor import take_rows
from .permutation import PermutationMap, compute_permutation
from .predictor import (CoordinateTable, compression_ratio, crop_center, init_predictor,
                        layer_scales, predict_layers)
from .target_net import WeightAtlas, evaluate, extract_weights, inject_weights

PHASES = ("baseline", "recon_only", "distill")


@dataclass
class TrainConfig:
    alpha: float = 1e-5
    beta: float = 1e-5
    p_uni: float = 0.8
    kernel_batch: int = 256
    data_batch: int = 64
    epochs: int = 150
    lr: float = 5e-3
    seed: int = 0
    phase: str = "recon_only"
    temperature: float = 1.0
    reset_optimizer: bool = True
    noise_inputs: bool = False
    lr_schedule: str = "cosine"

    def __post_init__(self):
        if not 0.0 <= self.p_uni <= 1.0:
            raise ValueError("p_uni must lie in [0, 1]")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.kernel_batch < 1 or self.data_batch < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError("lr_schedule must be 'cosine' or 'constant'")

    def lr_at(self, step, total):
        if self.lr_schedule == "constant" or total <= 0:
            return self.lr
        return self.lr * 0.5 * (1.0 + math.cos(math.pi * step / total))

    @classmethod
    def distill(cls, **kw):
        """Second-phase defaults: KD weight 0.01, no feature-map term, a smaller step size.

        Steps of 5e-3 wreck an already fitted predictor within a few hundred
        updates; noise inputs need another tenfold reduction.
        """
        kw.setdefault("alpha", 0.01)
        kw.setdefault("beta", 0.0)
        kw.setdefault("epochs", 50)
        kw.setdefault("lr", 1e-4 if kw.get("noise_inputs") else 1e-3)
        return cls(phase="distill", **kw)


@dataclass(frozen=True)
class LossBreakdown:
    recon: float
    kd: float
    fmd: float
    total: float

    @classmethod
    def combine(cls, recon, kd, fmd, alpha, beta):
        r, k, f = np.float32(recon), np.float32(kd), np.float32(fmd)
        return cls(float(r), float(k), float(f), float(r + np.float32(alpha) * k + np.float32(beta) * f))


@dataclass
class TrainResult:
    predictor: object
    history: list = field(default_factory=list)   # per-epoch mean LossBreakdown
    steps: list = field(default_factory=list)     # per-step LossBreakdown
    optimizer: object = None


# --------------------------------------------------------------------------- losses


def loss_recon(W, W_hat):
    """``||W - W_hat||_2 / |W|`` over the flattened atlases."""
    W.check_compatible(W_hat)
    diff = W.flat().astype(np.float64) - W_hat.flat().astype(np.float64)
    return float(np.sqrt(np.sum(diff * diff)) / W.total_size)


def loss_kd(logits_teacher, logits_student, temperature=1.0):
    """Batch-mean KL(teacher || student) of temperature-scaled softmax outputs."""
    return kl_divergence(logits_teacher, logits_student, temperature)


def loss_fmd(trace_a, trace_b):
    """Batch mean of summed per-layer distances between unit-normalized feature maps."""
    if len(trace_a.maps) != len(trace_b.maps):
        raise ValueError("traces come from different architectures")
    total = None
    for a, b in zip(trace_a.maps, trace_b.maps):
        a = a if isinstance(a, Tensor) else Tensor(a)
        b = b if isinstance(b, Tensor) else Tensor(b)
        if a.shape != b.shape:
            raise ValueError(f"feature map shapes differ: {a.shape} vs {b.shape}")
        term = sample_norms(_unit_maps(a) - _unit_maps(b))
        total = term if total is None else total + term
    return total.mean()


def _unit_maps(x):
    norms = np.sqrt(np.sum(x.data.reshape(x.shape[0], -1).astype(np.float64) ** 2, axis=1))
    bshape = (-1,) + (1,) * (x.ndim - 1)
    zero = (norms == 0).astype(x.data.dtype).reshape(bshape)
    n = sample_norms(x).reshape(bshape)
    return x / (n + zero)


# --------------------------------------------------------------------------- sampling


def kernel_norms(atlas):
    return np.concatenate([
        np.sqrt(np.sum(w.reshape(w.shape[0] * w.shape[1], -1).astype(np.float64) ** 2, axis=1))
        for _, w in atlas
    ])


def flat_to_coords(atlas, flat):
    sizes = np.array([w.shape[0] * w.shape[1] for _, w in atlas])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    flat = np.asarray(flat, dtype=np.int64)
    layer = np.searchsorted(offsets, flat, side="right") - 1
    local = flat - offsets[layer]
    chans = np.array([w.shape[1] for _, w in atlas])[layer]
    return np.stack([layer, local // chans, local % chans], axis=1)


def sample_kernel_indices(norms, p_uni, batch, rng):
    """Flat kernel indices: uniform with probability ``p_uni``, else proportional to ``norms``."""
    n = len(norms)
    if n == 0:
        raise ValueError("empty atlas")
    if batch < 1:
        raise ValueError("batch must be >= 1")
    uniform = rng.random(batch) < p_uni
    out = rng.integers(0, n, size=batch)
    n_weighted = int((~uniform).sum())
    if n_weighted:
        total = norms.sum()
        probs = norms / total if total > 0 else np.full(n, 1.0 / n)
        out[~uniform] = rng.choice(n, size=n_weighted, p=probs)
    return out


def sample_kernel_batch(atlas, p_uni, batch, rng):
    """``[batch, 3]`` array of (layer, filter, channel) coordinates, drawn with replacement."""
    return flat_to_coords(atlas, sample_kernel_indices(kernel_norms(atlas), p_uni, batch, rng))


# --------------------------------------------------------------------------- fitting helpers


class _ReconBatcher:
    """Targets of every kernel slot in predictor order, padded to ``k_max``."""

    def __init__(self, atlas, perm, table, k_max):
        from .permutation import apply
        permuted = apply(atlas, perm)
        rows, masks = [], []
        for (_, w), k in zip(permuted, table.kernel_sizes):
            n = w.shape[0] * w.shape[1]
            full = np.zeros((n, k_max, k_max), np.float32)
            mask = np.zeros((n, k_max, k_max), np.float32)
            o = (k_max - k) // 2
            full[:, o:o + k, o:o + k] = w.reshape(n, k, k)
            mask[:, o:o + k, o:o + k] = 1.0
            rows.append(full.reshape(n, -1))
            masks.append(mask.reshape(n, -1))
        self.targets = np.concatenate(rows)
        self.masks = np.concatenate(masks)
        self.norms = kernel_norms(permuted)
        layer_of = np.concatenate([np.full(table.offsets[i + 1] - table.offsets[i], i)
                                   for i in range(len(table.shapes))])
        self.layer_of = layer_of
        self.encoded = table.encoded

    def loss(self, predictor, idx):
        pred = predictor.forward(self.encoded[idx])
        scale = predictor.scales()[self.layer_of[idx]][:, None]
        mask = self.masks[idx]
        diff = (pred * (scale * mask)) - self.targets[idx] * mask
        return l2_norm(diff) * (1.0 / float(mask.sum()))


def _prepare(predictor, atlas, perm):
    perm = perm if perm is not None else PermutationMap.identity(atlas)
    table = CoordinateTable.build(predictor.encoding, atlas.shapes, perm, atlas.ids)
    return perm, table


def steps_per_epoch(atlas, config):
    return math.ceil(atlas.total_size / config.kernel_batch)


def _rngs(seed):
    kernel_ss, data_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(kernel_ss), np.random.default_rng(data_ss)


class _DataStream:
    def __init__(self, data, batch, rng, noise_shape=None):
        self.data, self.batch, self.rng = data, batch, rng
        self.noise_shape = noise_shape
        self._order, self._pos = None, 0

    def next(self):
        if self.noise_shape is not None:
            return self.rng.uniform(-1.0, 1.0, size=(self.batch,) + tuple(self.noise_shape)).astype(np.float32)
        if self._order is None or self._pos >= len(self._order):
            self._order, self._pos = self.rng.permutation(len(self.data)), 0
        idx = self._order[self._pos:self._pos + self.batch]
        self._pos += self.batch
        return self.data.images[idx]


def _epoch_means(steps, per_epoch):
    out = []
    for e in range(0, len(steps), per_epoch):
        chunk = steps[e:e + per_epoch]
        out.append(LossBreakdown(*(float(np.mean([getattr(s, k) for s in chunk]))
                                   for k in ("recon", "kd", "fmd", "total"))))
    return out


def _check_finite(value, what):
    if not np.isfinite(value):
        raise NonFiniteError(f"{what} diverged")


def new_predictor(atlas, spec, hidden=64, seed=0, encoding=None, activation="sine", num_frequencies=8):
    """Fresh predictor whose per-layer output scales come from ``atlas``."""
    from .predictor import EncodingConfig
    encoding = encoding or EncodingConfig.for_spec(spec, num_frequencies=num_frequencies)
    net = init_predictor(encoding, spec.k_max, hidden, seed, activation)
    net.layer_scales = layer_scales(atlas)
    return net


# --------------------------------------------------------------------------- regimes


def fit_recon_only(predictor, atlas, perm=None, config=None):
    """Optimize the reconstruction term alone on weighted kernel batches."""
    config = config or TrainConfig()
    if config.phase != "recon_only":
        raise ValueError("fit_recon_only needs phase='recon_only'")
    predictor = predictor.copy()
    perm, table = _prepare(predictor, atlas, perm)
    batcher = _ReconBatcher(atlas, perm, table, predictor.k_max)
    opt = Adam(predictor.parameters(), lr=config.lr)
    kernel_rng, _ = _rngs(config.seed)
    per_epoch = steps_per_epoch(atlas, config)
    steps = []
    total_steps = config.epochs * per_epoch
    for step in range(total_steps):
        idx = sample_kernel_indices(batcher.norms, config.p_uni, config.kernel_batch, kernel_rng)
        opt.state.lr = config.lr_at(step, total_steps)
        opt.zero_grad()
        loss = batcher.loss(predictor, idx)
        _check_finite(loss.item(), "reconstruction training")
        backward(loss)
        opt.step()
        steps.append(LossBreakdown.combine(loss.item(), 0.0, 0.0, 0.0, 0.0))
    return TrainResult(predictor, _epoch_means(steps, per_epoch), steps, opt)


def fit_baseline(predictor, net, data, perm=None, config=None):
    """Joint objective: kernel-batch reconstruction plus logit KD and feature-map distillation.

    Every step predicts the whole atlas for the distillation forward pass but
    restricts the reconstruction term to the sampled kernel batch.
    """
    config = config or TrainConfig(phase="baseline")
    if config.phase != "baseline":
        raise ValueError("fit_baseline needs phase='baseline'")
    atlas = extract_weights(net)
    predictor = predictor.copy()
    perm, table = _prepare(predictor, atlas, perm)
    batcher = _ReconBatcher(atlas, perm, table, predictor.k_max)
    opt = Adam(predictor.parameters(), lr=config.lr)
    kernel_rng, data_rng = _rngs(config.seed)
    stream = _DataStream(data, config.data_batch, data_rng)
    per_epoch = steps_per_epoch(atlas, config)
    steps = []
    total_steps = config.epochs * per_epoch
    for step in range(total_steps):
        idx = sample_kernel_indices(batcher.norms, config.p_uni, config.kernel_batch, kernel_rng)
        x = stream.next()
        opt.state.lr = config.lr_at(step, total_steps)
        opt.zero_grad()
        recon = batcher.loss(predictor, idx)
        weights = predict_layers(predictor, table)
        t_logits, t_trace = net.forward(x, trace=True)
        s_logits, s_trace = net.forward(x, conv_weights=weights, trace=True)
        kd = loss_kd(t_logits.data, s_logits, config.temperature)
        fmd = loss_fmd(_detach_trace(t_trace), s_trace)
        total = recon + kd * config.alpha + fmd * config.beta
        _check_finite(total.item(), "baseline training")
        backward(total)
        opt.step()
        steps.append(LossBreakdown(recon.item(), kd.item(), fmd.item(), total.item()))
    return TrainResult(predictor, _epoch_means(steps, per_epoch), steps, opt)


def _detach_trace(trace):
    from .target_net import ActivationTrace
    return ActivationTrace([Tensor(m.data) for m in trace.maps], Tensor(trace.logits.data))


def same_architecture(a, b):
    return a.spec == b.spec


def distill_phase(predictor, teacher, skeleton, data=None, perm=None, config=None, optimizer=None,
                  input_shape=None):
    """Fine-tune a fitted predictor with ``alpha * KD`` (plus ``beta * FMD`` for same-architecture teachers).

    ``skeleton`` is the original network: the student is always its
    architecture, normalization and classifier with predicted conv weights.
    With ``config.noise_inputs`` every batch is fresh ``U[-1, 1]`` noise of
    ``input_shape`` (taken from ``data`` when omitted).
    """
    config = config or TrainConfig.distill()
    if config.phase != "distill":
        raise ValueError("distill_phase needs phase='distill'")
    if teacher.spec.num_classes != skeleton.spec.num_classes:
        raise ValueError("teacher and student disagree on the number of classes")
    if config.beta > 0 and not same_architecture(teacher, skeleton):
        raise ValueError("feature-map distillation needs identical teacher and student architectures")
    atlas = extract_weights(skeleton)
    predictor = predictor.copy()
    perm, table = _prepare(predictor, atlas, perm)
    params = predictor.parameters()
    opt = Adam(params, lr=config.lr)
    if optimizer is not None and not config.reset_optimizer:
        opt.state.m = [m.copy() for m in optimizer.state.m]
        opt.state.v = [v.copy() for v in optimizer.state.v]
        opt.state.step_count = optimizer.state.step_count
    _, data_rng = _rngs(config.seed)
    if config.noise_inputs:
        shape = input_shape or (data.images.shape[1:] if data is not None else None)
        if shape is None:
            raise ValueError("noise inputs need an input shape")
        stream = _DataStream(None, config.data_batch, data_rng, noise_shape=shape)
    else:
        if data is None:
            raise ValueError("distillation needs data unless noise_inputs is set")
        stream = _DataStream(data, config.data_batch, data_rng)
    per_epoch = steps_per_epoch(atlas, config)
    steps = []
    total_steps = config.epochs * per_epoch
    for step in range(total_steps):
        x = stream.next()
        opt.state.lr = config.lr_at(step, total_steps)
        opt.zero_grad()
        total, kd, fmd = distill_objective(predictor, table, teacher, skeleton, x, config)
        _check_finite(total.item(), "distillation")
        backward(total)
        opt.step()
        steps.append(LossBreakdown(0.0, kd.item(), fmd.item(), total.item()))
    return TrainResult(predictor, _epoch_means(steps, per_epoch), steps, opt)


def distill_objective(predictor, table, teacher, skeleton, x, config):
    weights = predict_layers(predictor, table)
    want_trace = config.beta > 0
    if want_trace:
        t_logits, t_trace = teacher.forward(x, trace=True)
        s_logits, s_trace = skeleton.forward(x, conv_weights=weights, trace=True)
    else:
        t_logits = teacher.forward(x)
        s_logits = skeleton.forward(x, conv_weights=weights)
    kd = loss_kd(t_logits.data, s_logits, config.temperature)
    total = kd * config.alpha
    fmd = Tensor(0.0)
    if want_trace:
        fmd = loss_fmd(_detach_trace(t_trace), s_trace)
        total = total + fmd * config.beta
    return total, kd, fmd


def reconstructed_network(predictor, skeleton, perm=None):
    from .predictor import reconstruct_atlas
    return inject_weights(skeleton, reconstruct_atlas(predictor, skeleton.spec, perm))


# --------------------------------------------------------------------------- progressive


@dataclass
class RoundReport:
    round: int
    accuracy: float            # test accuracy of the selected seed
    val_accuracy: float
    recon_to_target: float
    recon_to_original: float
    cr: float
    seed: int
    seed_accuracies: list      # test accuracy per seed
    seed_val_accuracies: list
    target_val_accuracy: float
    improved: bool


def progressive_reconstruct(net0, rounds, config, val_data, test_data, seeds=(0, 1, 2), hidden=64,
                            perm_mode="in_filter", early_stop=True, activation="sine",
                            num_frequencies=8):
    """Rounds of reconstruction-only fitting, each targeting the previous round's best network.

    Selection uses validation accuracy. A round in which no seed beats its
    target's validation accuracy is reported and ends the run.
    """
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    original = extract_weights(net0)
    target = net0
    target_val = evaluate(net0, val_data)
    reports, atlases = [], []
    for r in range(1, rounds + 1):
        target_atlas = extract_weights(target)
        perm = compute_permutation(target_atlas, perm_mode)
        candidates = []
        for seed in seeds:
            pred = new_predictor(target_atlas, net0.spec, hidden, seed, activation=activation,
                                 num_frequencies=num_frequencies)
            res = fit_recon_only(pred, target_atlas, perm, replace(config, seed=seed, phase="recon_only"))
            recon_net = reconstructed_network(res.predictor, net0, perm)
            candidates.append((evaluate(recon_net, val_data), seed, recon_net, res.predictor))
        best = max(candidates, key=lambda c: (c[0], -c[1]))
        val_acc, seed, best_net, best_pred = best
        best_atlas = extract_weights(best_net)
        improved = val_acc > target_val
        reports.append(RoundReport(
            r, evaluate(best_net, test_data), val_acc,
            loss_recon(target_atlas, best_atlas), loss_recon(original, best_atlas),
            compression_ratio(best_pred, original).ratio, seed,
            [evaluate(c[2], test_data) for c in candidates], [c[0] for c in candidates],
            target_val, improved,
        ))
        atlases.append(best_atlas)
        if early_stop and not improved:
            break
        target, target_val = best_net, val_acc
    return reports, atlases
