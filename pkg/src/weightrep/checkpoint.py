"""Binary checkpoint container (``.nwc``).

Layout, all integers little-endian::

    b"NWPC"  u32 version  u8 kind
    u32 n_meta   { u16 len, utf-8 key, u32 len, utf-8 value } * n_meta
    u32 n_tensor { u16 len, utf-8 name, u8 rank, u32 dim * rank, u8 dtype, payload } * n_tensor

dtype 0 is float32, stored row-major.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .permutation import PermutationMap
from .predictor import EncodingConfig, PredictorNet
from .target_net import ConvSpec, TargetNetwork, WeightAtlas

MAGIC = b"NWPC"
VERSION = 1
KINDS = {"target_net": 0, "predictor": 1, "atlas": 2}
KIND_NAMES = {v: k for k, v in KINDS.items()}
DTYPE_F32 = 0


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    kind: str
    tensors: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def to_bytes(ckpt):
    if ckpt.kind not in KINDS:
        raise CheckpointError(f"unknown checkpoint kind {ckpt.kind!r}")
    out = [MAGIC, struct.pack("<IB", VERSION, KINDS[ckpt.kind]), struct.pack("<I", len(ckpt.meta))]
    for key, val in ckpt.meta.items():
        k, v = str(key).encode(), str(val).encode()
        out += [struct.pack("<H", len(k)), k, struct.pack("<I", len(v)), v]
    out.append(struct.pack("<I", len(ckpt.tensors)))
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        if arr.dtype != np.float32:
            raise CheckpointError(f"tensor {name!r} must be float32, got {arr.dtype}")
        n = name.encode()
        out += [struct.pack("<H", len(n)), n, struct.pack("<B", arr.ndim),
                struct.pack(f"<{arr.ndim}I", *arr.shape), struct.pack("<B", DTYPE_F32),
                np.ascontiguousarray(arr, dtype="<f4").tobytes()]
    return b"".join(out)


class _Reader:
    def __init__(self, raw):
        self.raw, self.pos = raw, 0

    def take(self, fmt):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.raw):
            raise CheckpointError("truncated checkpoint")
        vals = struct.unpack_from(fmt, self.raw, self.pos)
        self.pos += size
        return vals

    def bytes(self, n):
        if self.pos + n > len(self.raw):
            raise CheckpointError("truncated checkpoint")
        b = self.raw[self.pos:self.pos + n]
        self.pos += n
        return b


def from_bytes(raw):
    if raw[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    r = _Reader(raw)
    r.pos = 4
    version, kind = r.take("<IB")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if kind not in KIND_NAMES:
        raise CheckpointError(f"unknown kind tag {kind}")
    meta = {}
    (n_meta,) = r.take("<I")
    for _ in range(n_meta):
        (kl,) = r.take("<H")
        key = r.bytes(kl).decode()
        (vl,) = r.take("<I")
        meta[key] = r.bytes(vl).decode()
    tensors = {}
    (n_t,) = r.take("<I")
    for _ in range(n_t):
        (nl,) = r.take("<H")
        name = r.bytes(nl).decode()
        (rank,) = r.take("<B")
        dims = r.take(f"<{rank}I") if rank else ()
        (dtype,) = r.take("<B")
        if dtype != DTYPE_F32:
            raise CheckpointError(f"unsupported dtype tag {dtype}")
        count = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(r.bytes(4 * count), "<f4").astype(np.float32).reshape(dims)
        tensors[name] = data
    if r.pos != len(raw):
        raise CheckpointError("trailing bytes after checkpoint")
    return Checkpoint(KIND_NAMES[kind], tensors, meta)


def save_checkpoint(path, ckpt):
    with open(path, "wb") as fh:
        fh.write(to_bytes(ckpt))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return from_bytes(fh.read())


# --------------------------------------------------------------------------- conversions


def target_to_checkpoint(net):
    t = {}
    for i in range(len(net.spec.layers)):
        t[f"conv.{i}"] = net.conv[i]
        t[f"bn_scale.{i}"] = net.bn_scale[i]
        t[f"bn_shift.{i}"] = net.bn_shift[i]
        t[f"bn_mean.{i}"] = net.bn_mean[i]
        t[f"bn_var.{i}"] = net.bn_var[i]
    t["fc_weight"] = net.fc_weight
    t["fc_bias"] = net.fc_bias
    meta = {"spec": net.spec.to_json(), "version": str(VERSION)}
    meta.update({f"meta.{k}": json.dumps(v) for k, v in sorted(net.meta.items())})
    return Checkpoint("target_net", t, meta)


def target_from_checkpoint(ckpt):
    _expect(ckpt, "target_net")
    spec = ConvSpec.from_json(ckpt.meta["spec"])
    n = len(spec.layers)
    t = ckpt.tensors
    meta = {k[5:]: json.loads(v) for k, v in ckpt.meta.items() if k.startswith("meta.")}
    return TargetNetwork(
        spec,
        [t[f"conv.{i}"] for i in range(n)],
        [t[f"bn_scale.{i}"] for i in range(n)],
        [t[f"bn_shift.{i}"] for i in range(n)],
        [t[f"bn_mean.{i}"] for i in range(n)],
        [t[f"bn_var.{i}"] for i in range(n)],
        t["fc_weight"], t["fc_bias"], meta,
    )


def predictor_to_checkpoint(pred, perm=None, spec=None, extra=None):
    t = {}
    for i, (w, b) in enumerate(zip(pred.weights, pred.biases)):
        t[f"weight.{i}"] = w.data
        t[f"bias.{i}"] = b.data
    t["layer_scales"] = pred.scales()
    meta = {
        "encoding": json.dumps({"extents": [list(e) for e in pred.encoding.extents],
                                "num_frequencies": pred.encoding.num_frequencies,
                                "base": pred.encoding.base}),
        "k_max": str(pred.k_max),
        "activation": pred.activation,
        "first_omega": repr(pred.first_omega),
        "hidden_omega": repr(pred.hidden_omega),
        "version": str(VERSION),
    }
    if perm is not None:
        meta["perm.mode"] = perm.mode
        for i, o in enumerate(perm.orders):
            meta[f"perm.{i}"] = ",".join(map(str, o.tolist()))
    if spec is not None:
        meta["spec"] = spec.to_json()
    meta.update(extra or {})
    return Checkpoint("predictor", t, meta)


def predictor_from_checkpoint(ckpt):
    """Returns ``(predictor, permutation or None)``."""
    _expect(ckpt, "predictor")
    enc = json.loads(ckpt.meta["encoding"])
    encoding = EncodingConfig(tuple(tuple(e) for e in enc["extents"]), enc["num_frequencies"], enc["base"])
    t = ckpt.tensors
    pred = PredictorNet(
        [t[f"weight.{i}"].copy() for i in range(5)], [t[f"bias.{i}"].copy() for i in range(5)],
        encoding, int(ckpt.meta["k_max"]), ckpt.meta["activation"], float(ckpt.meta["first_omega"]),
        float(ckpt.meta["hidden_omega"]), t["layer_scales"].copy(),
    )
    perm = None
    if "perm.mode" in ckpt.meta:
        orders = [np.array([int(x) for x in ckpt.meta[f"perm.{i}"].split(",")], dtype=np.int64)
                  for i in range(encoding.num_layers)]
        perm = PermutationMap(ckpt.meta["perm.mode"], orders)
    return pred, perm


def atlas_to_checkpoint(atlas, extra=None):
    t = {f"layer.{lid}": w for lid, w in atlas}
    meta = {"layer_ids": ",".join(map(str, atlas.ids)), "version": str(VERSION)}
    meta.update(extra or {})
    return Checkpoint("atlas", t, meta)


def atlas_from_checkpoint(ckpt):
    _expect(ckpt, "atlas")
    ids = [int(x) for x in ckpt.meta["layer_ids"].split(",")] if ckpt.meta.get("layer_ids") else []
    return WeightAtlas([(i, ckpt.tensors[f"layer.{i}"]) for i in ids])


def atlas_of(ckpt):
    """Atlas view of any checkpoint kind that carries conv weights."""
    if ckpt.kind == "atlas":
        return atlas_from_checkpoint(ckpt)
    if ckpt.kind == "target_net":
        net = target_from_checkpoint(ckpt)
        return WeightAtlas([(i, w) for i, w in enumerate(net.conv)])
    raise CheckpointError(f"a {ckpt.kind} checkpoint carries no conv weights")


def _expect(ckpt, kind):
    if ckpt.kind != kind:
        raise CheckpointError(f"expected a {kind} checkpoint, got {ckpt.kind}")
