"""Measurements on weight atlases: spectral energy ratios, layer differences,
1-D interpolation curves and 2-D loss planes."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import singular_values
from .target_net import WeightAtlas, blend, evaluate, inject_weights, mean_loss
from .training import loss_recon


def layer_matrix(w):
    """Conv tensor ``[F, C, k, k]`` as an ``F x (C k k)`` matrix, filters as rows."""
    w = np.asarray(w)
    return w.reshape(w.shape[0], -1)


def s_ratio(M, sigma=None):
    """Share of squared singular-value energy held by the first ``floor(k/2)`` values."""
    M = np.asarray(getattr(M, "data", M), dtype=np.float64)
    if not np.any(M):
        raise ValueError("S_ratio is undefined for a zero matrix")
    sigma = singular_values(M) if sigma is None else sigma
    energy = sigma ** 2
    half = len(sigma) // 2
    return float(energy[:half].sum() / energy.sum())


@dataclass
class LayerSpectrum:
    layer: int
    shape: tuple
    sigma: np.ndarray
    s_ratio: float
    degenerate: bool  # k = 1: empty numerator, reported as 0


@dataclass
class SpectralProfile:
    layers: list
    delta: list = field(default_factory=list)

    @property
    def ratios(self):
        return [r.s_ratio for r in self.layers]


def s_ratio_profile(atlas):
    out = []
    for lid, w in atlas:
        M = layer_matrix(w)
        if not np.any(M):
            raise ValueError(f"layer {lid} is all zeros")
        sigma = singular_values(M)
        out.append(LayerSpectrum(lid, M.shape, sigma, s_ratio(M, sigma), len(sigma) < 2))
    return SpectralProfile(out)


def delta_profile(recon, orig):
    """Per-layer ``S_ratio(recon) - S_ratio(orig)``; the returned profile is the reconstructed one."""
    recon.check_compatible(orig)
    a, b = s_ratio_profile(recon), s_ratio_profile(orig)
    a.delta = [x.s_ratio - y.s_ratio for x, y in zip(a.layers, b.layers)]
    return a


def later_half_mean(profile):
    """Mean Delta over the last half of non-degenerate layers (informational)."""
    vals = [d for d, lyr in zip(profile.delta, profile.layers) if not lyr.degenerate]
    if not vals:
        return float("nan")
    return float(np.mean(vals[len(vals) // 2:]))


def layer_diff(a, b):
    a.check_compatible(b)
    return [float(np.mean(np.abs(wa.astype(np.float64) - wb))) for (_, wa), (_, wb) in zip(a, b)]


# --------------------------------------------------------------------------- interpolation


@dataclass
class InterpolationCurve:
    alphas: np.ndarray
    errors: np.ndarray
    accuracies: np.ndarray
    start: str = "original"
    end: str = "reconstructed"


def interpolate_curve(w_o, w_bar, n_points, skeleton, data, start="original", end="reconstructed"):
    """Accuracy and reconstruction error along ``(1 - a) w_o + a w_bar``."""
    w_o.check_compatible(w_bar)
    if n_points < 2:
        raise ValueError("need at least two grid points")
    alphas = np.linspace(0.0, 1.0, n_points)
    errors, accs = [], []
    for a in alphas:
        w = blend(w_o, w_bar, a)
        errors.append(loss_recon(w_o, w))
        accs.append(evaluate(inject_weights(skeleton, w), data))
    return InterpolationCurve(alphas, np.array(errors), np.array(accs), start, end)


# --------------------------------------------------------------------------- loss plane


@dataclass
class LossPlaneGrid:
    xs: np.ndarray
    ys: np.ndarray
    train_loss: np.ndarray   # [len(ys), len(xs)]
    test_loss: np.ndarray
    test_error: np.ndarray
    anchors: list            # (name, x, y, train_loss, test_loss, test_error)
    origin: np.ndarray = field(repr=False, default=None)
    u: np.ndarray = field(repr=False, default=None)
    v: np.ndarray = field(repr=False, default=None)
    template: WeightAtlas = field(repr=False, default=None)

    def weights_at(self, x, y):
        return _unflatten(self.origin + x * self.u + y * self.v, self.template)


def _unflatten(flat, template):
    out, pos = [], 0
    for lid, w in template:
        out.append((lid, flat[pos:pos + w.size].reshape(w.shape).astype(np.float32)))
        pos += w.size
    return WeightAtlas(out)


def plane_basis(w1, w2, w3, tol=1e-6):
    """Orthonormal ``(u, v)`` spanning the anchors' plane, by Gram-Schmidt.

    ``tol`` is relative and sits above float32 rounding, so a stored midpoint
    of two anchors still counts as collinear.
    """
    w1.check_compatible(w2)
    w1.check_compatible(w3)
    o = w1.flat().astype(np.float64)
    d2 = w2.flat().astype(np.float64) - o
    d3 = w3.flat().astype(np.float64) - o
    n2 = np.linalg.norm(d2)
    if n2 == 0:
        raise ValueError("anchors are collinear: first two coincide")
    u = d2 / n2
    r = d3 - (d3 @ u) * u
    nr = np.linalg.norm(r)
    if nr <= tol * max(np.linalg.norm(d3), n2):
        raise ValueError("anchors are collinear: no second plane direction")
    return o, u, r / nr


def _evaluate_cell(net, train, test):
    acc = evaluate(net, test)
    return mean_loss(net, train), mean_loss(net, test), 1.0 - acc


def loss_plane(w1, w2, w3, grid_n, skeleton, train_data, test_data, margin=0.2,
               names=("w1", "w2", "w3")):
    o, u, v = plane_basis(w1, w2, w3)
    pts = []
    for w in (w1, w2, w3):
        d = w.flat().astype(np.float64) - o
        pts.append((float(d @ u), float(d @ v)))
    pts = np.array(pts)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = hi - lo
    xs = np.linspace(lo[0] - margin * span[0], hi[0] + margin * span[0], grid_n)
    ys = np.linspace(lo[1] - margin * span[1], hi[1] + margin * span[1], grid_n)
    grid = LossPlaneGrid(xs, ys, np.zeros((grid_n, grid_n)), np.zeros((grid_n, grid_n)),
                         np.zeros((grid_n, grid_n)), [], o, u, v, w1)
    for j, y in enumerate(ys):
        for i, x in enumerate(xs):
            net = inject_weights(skeleton, grid.weights_at(x, y))
            grid.train_loss[j, i], grid.test_loss[j, i], grid.test_error[j, i] = _evaluate_cell(
                net, train_data, test_data)
    # anchors lie in the plane; evaluating their own weights avoids a float32 round trip
    for name, (x, y), w in zip(names, pts, (w1, w2, w3)):
        net = inject_weights(skeleton, w)
        grid.anchors.append((name, x, y) + _evaluate_cell(net, train_data, test_data))
    return grid
