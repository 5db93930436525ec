"""Command-line front end.

Every run owns its ``--out`` directory and writes ``manifest.cfg`` there: the
fully resolved configuration as ``key = value`` lines. Passing that file back
with ``--config`` (and a fresh ``--out``) repeats the run; the CSVs come out
byte-identical.

CSV schemas (header row first, floats with 9 significant digits):

=============  ================================================================
losses.csv     phase, epoch, recon, kd, fmd, ce, total
metrics.csv    metric, value
rounds.csv     round, seed, selected, val_accuracy, test_accuracy,
               recon_to_target, recon_to_original, cr, target_val_accuracy,
               improved
sratio.csv     layer, rows, cols, s_ratio, degenerate, ref_s_ratio, delta
diff.csv       layer, mean_abs_diff
interp.csv     alpha, recon_error, accuracy
plane.csv      kind, name, x, y, train_loss, test_loss, test_error
attack.csv     attack, eps, steps, accuracy
aggregate.csv  metric, n, median, mean, min, max
=============  ================================================================
"""
from __future__ import annotations

import argparse
import csv
import os
import statistics
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .checkpoint import (CheckpointError, atlas_to_checkpoint, load_checkpoint, predictor_from_checkpoint,
                         predictor_to_checkpoint, save_checkpoint, target_from_checkpoint,
                         target_to_checkpoint)
from .numerics import NonFiniteError
from .permutation import MODES, compute_permutation
from .predictor import compression_ratio, reconstruct_atlas
from .target_net import (PRESETS, BlobTask, TargetTrainConfig, build_target, evaluate,
                         extract_weights, fgsm, ifgsm, inject_weights, load_dataset, preset_spec,
                         save_dataset, train_target)
from .training import (TrainConfig, distill_phase, fit_baseline, fit_recon_only, loss_recon,
                       new_predictor, progressive_reconstruct, reconstructed_network)

PROG = "weightrep"
COMMANDS = ("gen-data", "train-target", "fit", "distill", "progressive", "analyze", "attack", "report")
ANALYSES = ("sratio", "diff", "interp", "plane")
FIT_MODES = ("recon_only", "baseline")
TRAIN_FIELDS = tuple(f.name for f in fields(TrainConfig) if f.name != "phase")
PATH_FIELDS = ("data", "ckpt", "ref", "ref2", "target", "teacher", "runs", "out")


class UsageError(Exception):
    """Bad flags or an invalid configuration (exit status 2)."""


@dataclass
class ExperimentConfig:
    command: str = ""
    mode: str = ""
    out: str = ""
    # data
    data: str = ""
    data_seed: int = 0
    n_train: int = 2000
    n_val: int = 1000
    n_test: int = 2000
    # target network
    arch: str = "tiny"
    target_epochs: int = 25
    target_lr: float = 1e-2
    augment_shift: int = 0
    augment_noise: float = 0.0
    # predictor
    hidden: int = 64
    num_frequencies: int = 8
    perm: str = "in_filter"
    # inputs
    ckpt: str = ""
    ref: str = ""
    ref2: str = ""
    target: str = ""
    teacher: str = ""
    runs: str = ""
    # progressive
    rounds: int = 3
    seeds: str = "0,1,2"
    early_stop: bool = True
    # analysis and attacks
    points: int = 11
    grid: int = 11
    eps: float = 0.1
    steps: int = 10
    # training, filled per command when left unset
    alpha: float = None
    beta: float = None
    p_uni: float = None
    kernel_batch: int = None
    data_batch: int = None
    epochs: int = None
    lr: float = None
    seed: int = None
    temperature: float = None
    reset_optimizer: bool = None
    noise_inputs: bool = None
    lr_schedule: str = None

    def train_config(self, phase):
        return TrainConfig(phase=phase, **{k: getattr(self, k) for k in TRAIN_FIELDS})

    def seed_list(self):
        try:
            seeds = [int(s) for s in self.seeds.split(",") if s.strip()]
        except ValueError:
            raise UsageError(f"seeds must be comma-separated integers, got {self.seeds!r}") from None
        if not seeds:
            raise UsageError("seeds is empty")
        return seeds


_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}
_TYPES.update({k: {f.name: f.type for f in fields(TrainConfig)}[k] for k in TRAIN_FIELDS})


def _convert(key, text):
    kind = _TYPES[key]
    text = text.strip()
    try:
        if kind in ("bool", bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind in ("int", int):
            return int(text)
        if kind in ("float", float):
            return float(text)
    except ValueError:
        raise UsageError(f"{key}: cannot parse {text!r} as {kind}") from None
    return text


def _format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def read_config(path):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    values = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _TYPES:
            raise UsageError(f"{path}:{n}: unknown key {key!r}")
        values[key] = _convert(key, val)
    return values


def write_manifest(cfg, path):
    lines = ["# weightrep run manifest; repeat with --config manifest.cfg --out <new dir>"]
    for f in fields(cfg):
        lines.append(f"{f.name} = {_format_value(getattr(cfg, f.name))}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# --------------------------------------------------------------------------- defaults


def training_defaults(command, mode, noise):
    """TrainConfig values a command uses when neither file nor flag sets them."""
    base = {k: getattr(TrainConfig(), k) for k in TRAIN_FIELDS}
    if command == "distill":
        d = TrainConfig.distill(noise_inputs=noise)
        base.update(alpha=d.alpha, beta=d.beta, epochs=d.epochs, lr=d.lr)
    return base


def resolve(cfg):
    noise = bool(cfg.noise_inputs)
    for key, val in training_defaults(cfg.command, cfg.mode, noise).items():
        if getattr(cfg, key) is None:
            setattr(cfg, key, val)
    for key in PATH_FIELDS:
        val = getattr(cfg, key)
        if val:
            setattr(cfg, key, str(Path(val).resolve()))
    return cfg


def validate(cfg):
    if not cfg.out:
        raise UsageError("--out is required")
    if cfg.hidden < 1:
        raise UsageError("hidden size must be >= 1")
    if cfg.perm not in MODES:
        raise UsageError(f"perm must be one of {', '.join(MODES)}")
    if cfg.arch not in PRESETS:
        raise UsageError(f"arch must be one of {', '.join(sorted(PRESETS))}")
    for key in ("rounds", "points", "grid", "n_train", "n_val", "n_test", "num_frequencies"):
        if getattr(cfg, key) < 1:
            raise UsageError(f"{key} must be >= 1")
    if cfg.steps < 0 or cfg.eps < 0:
        raise UsageError("eps and steps must be non-negative")
    if cfg.command == "fit" and cfg.mode not in FIT_MODES:
        raise UsageError(f"fit needs --mode {{{','.join(FIT_MODES)}}}")
    if cfg.command == "analyze" and cfg.mode not in ANALYSES:
        raise UsageError(f"analyze needs one of {', '.join(ANALYSES)}")
    for key in ("data", "ckpt", "ref", "ref2", "target", "teacher", "runs"):
        val = getattr(cfg, key)
        if val and not Path(val).exists():
            raise UsageError(f"{key}: no such file or directory: {val}")
    needs = {
        "train-target": (), "gen-data": (), "fit": ("ckpt",), "distill": ("ckpt",),
        "progressive": ("ckpt",), "attack": ("ckpt",), "report": ("runs",),
        "analyze": {"sratio": ("ckpt",), "diff": ("ckpt", "ref"), "interp": ("ckpt", "ref"),
                    "plane": ("ckpt", "ref", "ref2")}.get(cfg.mode, ()),
    }[cfg.command]
    for key in needs:
        if not getattr(cfg, key):
            raise UsageError(f"{cfg.command} needs --{key.replace('_', '-')}")
    try:
        cfg.train_config({"fit": cfg.mode, "distill": "distill"}.get(cfg.command, "recon_only"))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if cfg.command == "progressive":
        cfg.seed_list()
    return cfg


# --------------------------------------------------------------------------- io helpers


def fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".9g")
    return str(v)


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def write_metrics(out, metrics):
    write_csv(out / "metrics.csv", ["metric", "value"], list(metrics.items()))


def loss_rows(phase, history):
    return [(phase, i + 1, h.recon, h.kd, h.fmd, 0.0, h.total) for i, h in enumerate(history)]


LOSS_HEADER = ["phase", "epoch", "recon", "kd", "fmd", "ce", "total"]


def load_splits(cfg):
    if cfg.data:
        d = Path(cfg.data)
        try:
            return tuple(load_dataset(d / f"{name}.nwd") for name in ("train", "val", "test"))
        except OSError as exc:
            raise UsageError(f"data: {exc.strerror}: {exc.filename}") from None
    return BlobTask().splits(cfg.n_train, cfg.n_val, cfg.n_test, seed=cfg.data_seed)


def load_target(path):
    ckpt = load_checkpoint(path)
    if ckpt.kind != "target_net":
        raise CheckpointError(f"{path}: expected a target_net checkpoint, got {ckpt.kind}")
    return target_from_checkpoint(ckpt)


def load_predictor(path, target_override=""):
    """``(predictor, perm, skeleton network)`` from a predictor checkpoint."""
    ckpt = load_checkpoint(path)
    if ckpt.kind != "predictor":
        raise CheckpointError(f"{path}: expected a predictor checkpoint, got {ckpt.kind}")
    pred, perm = predictor_from_checkpoint(ckpt)
    skeleton_path = target_override or ckpt.meta.get("target", "")
    if not skeleton_path or not Path(skeleton_path).exists():
        raise UsageError(f"{path}: target network not found; pass --target")
    return pred, perm, load_target(skeleton_path)


def load_network(path, target_override=""):
    """A runnable network from a target or predictor checkpoint."""
    kind = load_checkpoint(path).kind
    if kind == "target_net":
        return load_target(path)
    if kind == "predictor":
        pred, perm, skeleton = load_predictor(path, target_override)
        return reconstructed_network(pred, skeleton, perm)
    raise CheckpointError(f"{path}: a {kind} checkpoint is not a runnable network")


def load_atlas(path, target_override=""):
    ckpt = load_checkpoint(path)
    if ckpt.kind == "atlas":
        from .checkpoint import atlas_from_checkpoint
        return atlas_from_checkpoint(ckpt)
    return extract_weights(load_network(path, target_override))


# --------------------------------------------------------------------------- commands


def cmd_gen_data(cfg, out):
    splits = BlobTask().splits(cfg.n_train, cfg.n_val, cfg.n_test, seed=cfg.data_seed)
    metrics = {}
    for name, ds in zip(("train", "val", "test"), splits):
        save_dataset(out / f"{name}.nwd", ds)
        metrics[f"{name}_samples"] = len(ds)
    write_metrics(out, metrics)


def cmd_train_target(cfg, out):
    train, val, test = load_splits(cfg)
    spec = preset_spec(cfg.arch, in_channels=train.images.shape[1],
                       num_classes=int(max(train.labels.max(), test.labels.max())) + 1)
    net = build_target(spec, cfg.seed)
    tcfg = TargetTrainConfig(lr=cfg.target_lr, seed=cfg.seed, augment_shift=cfg.augment_shift,
                             augment_noise=cfg.augment_noise)
    net, history = train_target(net, train, cfg.target_epochs, tcfg)
    net.meta = {"arch": cfg.arch, "seed": cfg.seed}
    save_checkpoint(out / "target.nwc", target_to_checkpoint(net))
    write_csv(out / "losses.csv", LOSS_HEADER,
              [("target", h["epoch"], 0.0, 0.0, 0.0, h["loss"], h["loss"]) for h in history])
    write_metrics(out, {"train_accuracy": evaluate(net, train), "val_accuracy": evaluate(net, val),
                        "test_accuracy": evaluate(net, test), "conv_params": spec.total_weights})


def _predictor_metrics(pred, perm, skeleton, val, test):
    orig = extract_weights(skeleton)
    recon = reconstruct_atlas(pred, skeleton.spec, perm)
    net = inject_weights(skeleton, recon)
    return {
        "val_accuracy": evaluate(net, val), "test_accuracy": evaluate(net, test),
        "original_test_accuracy": evaluate(skeleton, test), "recon_loss": loss_recon(orig, recon),
        "cr": compression_ratio(pred, orig).ratio, "predictor_params": pred.num_parameters,
    }


def _save_predictor(out, pred, perm, skeleton, target_path):
    save_checkpoint(out / "predictor.nwc",
                    predictor_to_checkpoint(pred, perm, skeleton.spec, {"target": target_path}))


def cmd_fit(cfg, out):
    net = load_target(cfg.ckpt)
    train, val, test = load_splits(cfg)
    atlas = extract_weights(net)
    perm = compute_permutation(atlas, cfg.perm)
    pred = new_predictor(atlas, net.spec, cfg.hidden, cfg.seed, num_frequencies=cfg.num_frequencies)
    if cfg.mode == "recon_only":
        res = fit_recon_only(pred, atlas, perm, cfg.train_config("recon_only"))
    else:
        res = fit_baseline(pred, net, train, perm, cfg.train_config("baseline"))
    _save_predictor(out, res.predictor, perm, net, cfg.ckpt)
    write_csv(out / "losses.csv", LOSS_HEADER, loss_rows(cfg.mode, res.history))
    write_metrics(out, _predictor_metrics(res.predictor, perm, net, val, test))


def cmd_distill(cfg, out):
    pred, perm, skeleton = load_predictor(cfg.ckpt, cfg.target)
    teacher = load_target(cfg.teacher) if cfg.teacher else skeleton
    train, val, test = load_splits(cfg)
    res = distill_phase(pred, teacher, skeleton, None if cfg.noise_inputs else train, perm,
                        cfg.train_config("distill"), input_shape=train.images.shape[1:])
    target_path = cfg.target or load_checkpoint(cfg.ckpt).meta.get("target", "")
    _save_predictor(out, res.predictor, perm, skeleton, target_path)
    write_csv(out / "losses.csv", LOSS_HEADER, loss_rows("distill", res.history))
    metrics = _predictor_metrics(res.predictor, perm, skeleton, val, test)
    metrics["start_test_accuracy"] = evaluate(reconstructed_network(pred, skeleton, perm), test)
    metrics["teacher_test_accuracy"] = evaluate(teacher, test)
    write_metrics(out, metrics)


def cmd_progressive(cfg, out):
    net = load_target(cfg.ckpt)
    _, val, test = load_splits(cfg)
    reports, atlases = progressive_reconstruct(
        net, cfg.rounds, cfg.train_config("recon_only"), val, test, seeds=cfg.seed_list(),
        hidden=cfg.hidden, perm_mode=cfg.perm, early_stop=cfg.early_stop,
        num_frequencies=cfg.num_frequencies)
    rows = []
    for rep, atlas in zip(reports, atlases):
        save_checkpoint(out / f"round_{rep.round}.nwc", atlas_to_checkpoint(atlas, {"round": rep.round}))
        for s, acc, vacc in zip(cfg.seed_list(), rep.seed_accuracies, rep.seed_val_accuracies):
            rows.append((rep.round, s, s == rep.seed, vacc, acc, rep.recon_to_target,
                         rep.recon_to_original, rep.cr, rep.target_val_accuracy, rep.improved))
    write_csv(out / "rounds.csv", ["round", "seed", "selected", "val_accuracy", "test_accuracy",
                                   "recon_to_target", "recon_to_original", "cr", "target_val_accuracy",
                                   "improved"], rows)
    last = reports[-1]
    write_metrics(out, {"rounds_completed": len(reports), "final_test_accuracy": last.accuracy,
                        "final_recon_to_original": last.recon_to_original,
                        "original_test_accuracy": evaluate(net, test)})


def cmd_analyze(cfg, out):
    from . import analysis
    if cfg.mode == "sratio":
        atlas = load_atlas(cfg.ckpt, cfg.target)
        prof = analysis.s_ratio_profile(atlas)
        ref = None
        if cfg.ref:
            prof = analysis.delta_profile(atlas, load_atlas(cfg.ref, cfg.target))
            ref = [r - d for r, d in zip(prof.ratios, prof.delta)]
        rows = []
        for i, lyr in enumerate(prof.layers):
            rows.append((lyr.layer, lyr.shape[0], lyr.shape[1], lyr.s_ratio, lyr.degenerate,
                         "" if ref is None else fmt(ref[i]), "" if ref is None else fmt(prof.delta[i])))
        write_csv(out / "sratio.csv", ["layer", "rows", "cols", "s_ratio", "degenerate", "ref_s_ratio",
                                       "delta"], rows)
        metrics = {"layers": len(rows), "mean_s_ratio": float(np.mean(prof.ratios))}
        if ref is not None:
            metrics["later_half_delta_mean"] = analysis.later_half_mean(prof)
        write_metrics(out, metrics)
    elif cfg.mode == "diff":
        a, b = load_atlas(cfg.ckpt, cfg.target), load_atlas(cfg.ref, cfg.target)
        diffs = analysis.layer_diff(a, b)
        write_csv(out / "diff.csv", ["layer", "mean_abs_diff"], list(zip(a.ids, diffs)))
        write_metrics(out, {"mean_abs_diff": float(np.mean(diffs))})
    elif cfg.mode == "interp":
        net = load_network(cfg.ckpt, cfg.target)
        _, _, test = load_splits(cfg)
        curve = analysis.interpolate_curve(extract_weights(net), load_atlas(cfg.ref, cfg.target),
                                           cfg.points, net, test)
        write_csv(out / "interp.csv", ["alpha", "recon_error", "accuracy"],
                  zip(curve.alphas, curve.errors, curve.accuracies))
        write_metrics(out, {"start_accuracy": curve.accuracies[0], "end_accuracy": curve.accuracies[-1],
                            "end_recon_error": curve.errors[-1]})
    else:
        net = load_network(cfg.ckpt, cfg.target)
        train, _, test = load_splits(cfg)
        grid = analysis.loss_plane(extract_weights(net), load_atlas(cfg.ref, cfg.target),
                                   load_atlas(cfg.ref2, cfg.target), cfg.grid, net, train, test,
                                   names=("ckpt", "ref", "ref2"))
        rows = []
        for j, y in enumerate(grid.ys):
            for i, x in enumerate(grid.xs):
                rows.append(("cell", "", x, y, grid.train_loss[j, i], grid.test_loss[j, i],
                             grid.test_error[j, i]))
        rows += [("anchor",) + tuple(a) for a in grid.anchors]
        write_csv(out / "plane.csv", ["kind", "name", "x", "y", "train_loss", "test_loss", "test_error"],
                  rows)
        write_metrics(out, {f"{a[0]}_test_loss": a[4] for a in grid.anchors})


def cmd_attack(cfg, out):
    net = load_network(cfg.ckpt, cfg.target)
    _, _, test = load_splits(cfg)
    clean = evaluate(net, test)
    acc_f = evaluate(net, fgsm(net, test, cfg.eps))
    acc_i = evaluate(net, ifgsm(net, test, cfg.eps, cfg.steps))
    write_csv(out / "attack.csv", ["attack", "eps", "steps", "accuracy"],
              [("clean", 0.0, 0, clean), ("fgsm", cfg.eps, 1, acc_f), ("ifgsm", cfg.eps, cfg.steps, acc_i)])
    write_metrics(out, {"clean_accuracy": clean, "fgsm_accuracy": acc_f, "ifgsm_accuracy": acc_i})


def read_metrics(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["metric", "value"]:
        raise ValueError(f"{path}: not a metrics file")
    return {k: float(v) for k, v in rows[1:]}


def aggregate(per_run):
    """Per-metric ``(n, median, mean, min, max)`` over runs that report the metric."""
    keys = sorted({k for m in per_run for k in m})
    out = []
    for k in keys:
        vals = [m[k] for m in per_run if k in m]
        out.append((k, len(vals), statistics.median(vals), statistics.fmean(vals), min(vals), max(vals)))
    return out


def cmd_report(cfg, out):
    root = Path(cfg.runs)
    files = sorted(p for p in root.glob("*/metrics.csv") if p.parent.resolve() != out.resolve())
    if not files:
        raise UsageError(f"no run directories with metrics.csv under {root}")
    rows = aggregate([read_metrics(p) for p in files])
    write_csv(out / "aggregate.csv", ["metric", "n", "median", "mean", "min", "max"], rows)


COMMAND_HELP = {
    "gen-data": "write train/val/test splits of the synthetic blob task",
    "train-target": "train a residual CNN target on a generated dataset",
    "fit": "fit a weight predictor to a target (recon_only or baseline)",
    "distill": "second-phase KD for a fitted predictor, on data or uniform noise",
    "progressive": "repeated recon-only rounds, each targeting the previous best",
    "analyze": "S_ratio profile, layer differences, 1-D interpolation or 2-D loss plane",
    "attack": "clean, FGSM and I-FGSM accuracy of a network",
    "report": "aggregate metrics.csv files across run directories",
}

HANDLERS = {
    "gen-data": cmd_gen_data, "train-target": cmd_train_target, "fit": cmd_fit, "distill": cmd_distill,
    "progressive": cmd_progressive, "analyze": cmd_analyze, "attack": cmd_attack, "report": cmd_report,
}


# --------------------------------------------------------------------------- argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _flag(parser, name, key=None, **kw):
    parser.add_argument(name, dest=key or name.lstrip("-").replace("-", "_"), default=argparse.SUPPRESS, **kw)


def build_parser():
    parser = _Parser(prog=PROG, description="Neural weight-representation experiments.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name, help=COMMAND_HELP[name], description=COMMAND_HELP[name])
        if name == "analyze":
            p.add_argument("mode", choices=ANALYSES)
        _flag(p, "--config", metavar="PATH")
        _flag(p, "--out", metavar="DIR")
        _flag(p, "--seed", type=int)
        _flag(p, "--data", metavar="DIR")
        _flag(p, "--data-seed", type=int)
        _flag(p, "--ckpt", metavar="PATH")
        _flag(p, "--target", metavar="PATH")
        if name == "fit":
            _flag(p, "--mode", choices=FIT_MODES)
        if name == "gen-data":
            for n in ("--n-train", "--n-val", "--n-test"):
                _flag(p, n, type=int)
        if name == "train-target":
            _flag(p, "--arch", choices=sorted(PRESETS))
            _flag(p, "--epochs", key="target_epochs", type=int)
            _flag(p, "--lr", key="target_lr", type=float)
            _flag(p, "--augment-shift", type=int)
            _flag(p, "--augment-noise", type=float)
        if name in ("fit", "distill", "progressive"):
            _flag(p, "--hidden", type=int)
            _flag(p, "--alpha", type=float)
            _flag(p, "--beta", type=float)
            _flag(p, "--p-uni", type=float)
            _flag(p, "--epochs", type=int)
            _flag(p, "--lr", type=float)
            _flag(p, "--kernel-batch", type=int)
            _flag(p, "--data-batch", type=int)
            _flag(p, "--temperature", type=float)
            _flag(p, "--perm", choices=MODES)
            _flag(p, "--num-frequencies", type=int)
            _flag(p, "--lr-schedule", choices=("cosine", "constant"))
        if name == "distill":
            _flag(p, "--teacher", metavar="PATH")
            p.add_argument("--noise", dest="noise_inputs", action="store_true", default=argparse.SUPPRESS)
        if name == "progressive":
            _flag(p, "--rounds", type=int)
            _flag(p, "--seeds")
            p.add_argument("--no-early-stop", dest="early_stop", action="store_false",
                           default=argparse.SUPPRESS)
        if name == "analyze":
            _flag(p, "--ref", metavar="PATH")
            _flag(p, "--ref2", metavar="PATH")
            _flag(p, "--points", type=int)
            _flag(p, "--grid", type=int)
        if name == "attack":
            _flag(p, "--eps", type=float)
            _flag(p, "--steps", type=int)
        if name == "report":
            _flag(p, "--runs", metavar="DIR")
    return parser


def parse_config(argv):
    args = vars(build_parser().parse_args(argv))
    command = args.pop("command", None)
    if command is None:
        raise UsageError(f"missing subcommand; choose from {', '.join(COMMANDS)}")
    values = {}
    if "config" in args:
        values.update(read_config(args.pop("config")))
        if values.get("command", command) != command:
            raise UsageError(f"config was written by '{values['command']}', not '{command}'")
        if command == "analyze" and values.get("mode", args["mode"]) != args["mode"]:
            raise UsageError(f"config is for 'analyze {values['mode']}', not 'analyze {args['mode']}'")
    values.update(args)
    values["command"] = command
    if command not in ("fit", "analyze"):
        values.setdefault("mode", "")
    cfg = ExperimentConfig(**values)
    return validate(resolve(cfg))


def _thread_limit():
    raw = os.environ.get("NWP_THREADS", "").strip()
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"NWP_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"NWP_THREADS must be a positive integer, got {raw!r}")
    return n


def run(argv=None):
    """Entry point; returns the process exit status."""
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        cfg = parse_config(argv)
        threads = _thread_limit()
    except UsageError as exc:
        print(f"{PROG}: error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        write_manifest(cfg, out / "manifest.cfg")
        from threadpoolctl import threadpool_limits
        with threadpool_limits(limits=threads):
            HANDLERS[cfg.command](cfg, out)
    except UsageError as exc:
        print(f"{PROG}: error: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, NonFiniteError, ValueError, OSError, KeyError) as exc:
        print(f"{PROG}: {cfg.command} failed: {exc}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
