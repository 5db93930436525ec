"""Similarity orderings of kernels so that neighboring coordinates hold similar kernels.

The ordering only changes the order in which the predictor sees kernels; a
target network's own weights are never rewritten.
"""
from dataclasses import dataclass

import numpy as np

from .target_net import WeightAtlas

MODES = ("in_filter", "cross_filter", "identity")


@dataclass
class PermutationMap:
    """Per-layer flat index arrays: position ``p`` holds original slot ``orders[l][p]``.

    Slots are flattened as ``filter * channels + channel``.
    """

    mode: str
    orders: list

    def __post_init__(self):
        self.orders = [np.asarray(o, dtype=np.int64) for o in self.orders]
        for i, o in enumerate(self.orders):
            if not np.array_equal(np.sort(o), np.arange(len(o))):
                raise ValueError(f"layer {i}: order is not a bijection")

    def order(self, layer):
        return self.orders[layer]

    @classmethod
    def identity(cls, atlas):
        return cls("identity", [np.arange(w.shape[0] * w.shape[1]) for _, w in atlas])


def greedy_chain(vectors):
    """Nearest-neighbor chain from the smallest-norm row; ties go to the lowest index."""
    x = np.asarray(vectors, dtype=np.float64)
    n = len(x)
    if n <= 1:
        return np.arange(n)
    sq = np.sum(x * x, axis=1)
    dist = np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2.0 * x @ x.T, 0.0))
    visited = np.zeros(n, dtype=bool)
    cur = int(np.argmin(np.sqrt(sq)))
    order = [cur]
    visited[cur] = True
    for _ in range(n - 1):
        d = np.where(visited, np.inf, dist[cur])
        cur = int(np.argmin(d))  # argmin returns the first minimum
        order.append(cur)
        visited[cur] = True
    return np.asarray(order)


def compute_permutation(atlas, mode="in_filter"):
    if mode not in MODES:
        raise ValueError(f"unknown permutation mode {mode!r}")
    if len(atlas) == 0:
        raise ValueError("empty atlas")
    if mode == "identity":
        return PermutationMap.identity(atlas)
    orders = []
    for _, w in atlas:
        f, c = w.shape[:2]
        kernels = w.reshape(f * c, -1)
        if mode == "cross_filter":
            orders.append(greedy_chain(kernels))
        else:
            orders.append(np.concatenate([fi * c + greedy_chain(kernels[fi * c:(fi + 1) * c])
                                          for fi in range(f)]))
    return PermutationMap(mode, orders)


def _check(atlas, perm):
    if len(perm.orders) != len(atlas):
        raise ValueError("permutation and atlas differ in layer count")
    for (_, w), o in zip(atlas, perm.orders):
        if w.shape[0] * w.shape[1] != len(o):
            raise ValueError(f"permutation length {len(o)} does not match layer shape {w.shape}")


def apply(atlas, perm):
    """Reorder kernels into predictor order."""
    _check(atlas, perm)
    out = []
    for (lid, w), o in zip(atlas, perm.orders):
        flat = w.reshape(len(o), *w.shape[2:])
        out.append((lid, flat[o].reshape(w.shape)))
    return WeightAtlas(out)


def invert(atlas, perm):
    """Undo :func:`apply`."""
    _check(atlas, perm)
    out = []
    for (lid, w), o in zip(atlas, perm.orders):
        flat = w.reshape(len(o), *w.shape[2:])
        restored = np.empty_like(flat)
        restored[o] = flat
        out.append((lid, restored.reshape(w.shape)))
    return WeightAtlas(out)
