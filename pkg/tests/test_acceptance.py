"""End-to-end acceptance checks, one test per criterion.

Every check prints a ``criterion N: PASS|FAIL`` line (collected again in the
terminal summary by conftest.py). The desk-scale pipelines share one trained
tiny target: seed 0, 25 epochs on the standard 2000/1000/2000 blob splits.
Deselect the whole module with ``-m "not acceptance"``.
"""
import filecmp
import math
import zlib
import statistics
import time
from pathlib import Path

import numpy as np
import pytest

from gradcheck import composite_case, gradcheck, primitive_cases
from oracles import singular_values_oracle
from weightrep.analysis import delta_profile, interpolate_curve, later_half_mean, loss_plane, s_ratio
from weightrep.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from weightrep.cli import run
from weightrep.numerics import singular_values
from weightrep.permutation import apply, compute_permutation, invert
from weightrep.predictor import compression_ratio, crop_center, parameter_count
from weightrep.target_net import (ActivationTrace, BlobTask, ConvSpec, TargetTrainConfig, build_target,
                                  evaluate, extract_weights, fgsm, inject_weights, mean_loss, preset_spec,
                                  train_target)
from weightrep.training import (TrainConfig, distill_phase, fit_baseline, fit_recon_only, loss_fmd, loss_kd,
                                loss_recon, new_predictor, progressive_reconstruct, reconstructed_network)

pytestmark = pytest.mark.acceptance

SEEDS = (0, 1, 2)
RESULTS = []


def verdict(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    print(line)
    RESULTS.append(line)
    assert ok, line


def median(xs):
    return statistics.median(xs)


def pct(x):
    return f"{100 * x:.2f}%"


@pytest.fixture(scope="session")
def splits():
    return BlobTask().splits(2000, 1000, 2000, seed=0)


@pytest.fixture(scope="session")
def target(splits):
    train, _, _ = splits
    net, _ = train_target(build_target(preset_spec("tiny"), 0), train, 25, TargetTrainConfig(lr=1e-2, seed=0))
    return net


@pytest.fixture(scope="session")
def recon_runs(target):
    """Recon-only predictors at h = 40 (CR > 1), one per seed, with their fit time."""
    atlas = extract_weights(target)
    perm = compute_permutation(atlas, "in_filter")
    out = []
    for seed in SEEDS:
        t0 = time.perf_counter()
        res = fit_recon_only(new_predictor(atlas, target.spec, 40, seed), atlas, perm, TrainConfig(seed=seed))
        out.append((res.predictor, perm, time.perf_counter() - t0))
    return out


# --------------------------------------------------------------------------- 1


def test_criterion_1_numeric_substrate():
    t0 = time.perf_counter()
    worst = {}
    for name, build in primitive_cases():
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        worst[name] = max(gradcheck(*build(rng)) for _ in range(20))
    rng = np.random.default_rng(7)
    worst["composite"] = max(gradcheck(*composite_case(rng)) for _ in range(20))
    rng = np.random.default_rng(1)
    svd_err = 0.0
    for _ in range(50):
        M = rng.normal(size=tuple(int(d) for d in rng.integers(1, 17, size=2)))
        svd_err = max(svd_err, float(np.max(np.abs(singular_values(M) - singular_values_oracle(M)))))
    elapsed = time.perf_counter() - t0
    grad = max(worst.values())
    ok = grad <= 1e-3 and svd_err <= 1e-6 and elapsed < 60
    verdict(1, ok, f"{len(worst)} gradient checks x20, worst rel err {grad:.2e} ({max(worst, key=worst.get)}); "
                   f"SVD max abs err {svd_err:.2e} on 50 matrices; {elapsed:.1f}s")


# --------------------------------------------------------------------------- 2


def test_criterion_2_formula_oracles():
    t0 = time.perf_counter()
    from weightrep.target_net import WeightAtlas
    checks = {}
    W = WeightAtlas([(0, np.array([3.0, 4.0], np.float32).reshape(1, 2, 1, 1))])
    checks["recon W=W_hat"] = loss_recon(W, W) == 0.0
    checks["recon [3,4] vs 0"] = loss_recon(W, W.map(np.zeros_like)) == 2.5
    u = np.array([0.0, -1.0])  # unit direction whose shifted entries are exact in float32
    shifted = WeightAtlas([(0, W[0].astype(np.float64) + 0.25 * u.reshape(1, 2, 1, 1))])
    checks["recon eps/|W|"] = abs(loss_recon(W, shifted) - 0.25 / 2) <= 1e-12
    kl = loss_kd(np.zeros((1, 2)), np.array([[math.log(2.0), 0.0]])).item()
    checks["kd 0.058892"] = abs(kl - 0.058892) <= 1e-6
    a = ActivationTrace([np.array([[1.0, 0.0]])], None)
    b = ActivationTrace([np.array([[0.0, 1.0]])], None)
    checks["fmd sqrt2"] = abs(loss_fmd(a, b).item() - math.sqrt(2)) <= 1e-6
    maps = [np.random.default_rng(0).normal(size=(3, 2, 4, 4))]
    checks["fmd scale 7"] = abs(loss_fmd(ActivationTrace(maps, None),
                                         ActivationTrace([7 * m for m in maps], None)).item()) <= 1e-6
    checks["s_ratio I4"] = abs(s_ratio(np.eye(4)) - 0.5) <= 1e-9
    checks["s_ratio diag(3,2,1)"] = abs(s_ratio(np.diag([3.0, 2.0, 1.0])) - 9 / 14) <= 1e-9
    checks["CR 2700/10000"] = compression_ratio(2700, 10000).ratio == 0.27
    checks["CR percent"] = compression_ratio(2700, 10000).percent == 27.0
    checks["CR Q=P"] = compression_ratio(10000, 10000).ratio == 1.0
    checks["Q(24,16,3)"] = parameter_count(24, 16, 3) == 1369
    elapsed = time.perf_counter() - t0
    failed = [k for k, v in checks.items() if not v]
    verdict(2, not failed and elapsed < 10,
            f"{len(checks) - len(failed)}/{len(checks)} hand examples (KL {kl:.6f}); {elapsed:.2f}s"
            + (f"; failed: {failed}" if failed else ""))


# --------------------------------------------------------------------------- 3


def _random_spec(rng):
    widths = tuple(int(w) for w in rng.integers(1, 5, size=3))
    return ConvSpec.residual(widths=widths)


def test_criterion_3_structural_round_trips(tmp_path):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    bad = {"extract/inject": 0, "permutation": 0, "checkpoint": 0, "crop": 0}
    for case in range(100):
        spec = _random_spec(rng)
        net = build_target(spec, case)
        atlas = extract_weights(build_target(spec, case + 1000))
        back = extract_weights(inject_weights(net, atlas))
        bad["extract/inject"] += not all(np.array_equal(x, y) for (_, x), (_, y) in zip(atlas, back))

        mode = ("in_filter", "cross_filter", "identity")[case % 3]
        perm = compute_permutation(atlas, mode)
        again = invert(apply(atlas, perm), perm)
        bad["permutation"] += not all(np.array_equal(x, y) for (_, x), (_, y) in zip(atlas, again))

        tensors = {f"w{i}": w for i, w in atlas}
        path = tmp_path / f"{case}.nwc"
        save_checkpoint(path, Checkpoint("atlas", tensors, {"case": str(case), "text": "a = b # c"}))
        ck = load_checkpoint(path)
        bad["checkpoint"] += not (ck.meta == {"case": str(case), "text": "a = b # c"} and list(ck.tensors) == list(tensors)
                                  and all(ck.tensors[k].tobytes() == v.tobytes() for k, v in tensors.items()))

        k_max = int(rng.choice([1, 3, 5, 7]))
        x = rng.normal(size=(int(rng.integers(1, 4)), k_max, k_max)).astype(np.float32)
        bad["crop"] += not np.array_equal(crop_center(x, k_max), x)
    elapsed = time.perf_counter() - t0
    ok = not any(bad.values()) and elapsed < 30
    verdict(3, ok, f"100 cases each, mismatches {bad}; {elapsed:.1f}s")


# --------------------------------------------------------------------------- 4


def test_criterion_4_recon_only_above_unit_ratio(target, splits, recon_runs):
    train, _, test = splits
    atlas = extract_weights(target)
    orig = evaluate(target, test)
    train_acc = evaluate(target, train)
    accs, losses = [], []
    for pred, perm, _ in recon_runs:
        net = reconstructed_network(pred, target, perm)
        accs.append(evaluate(net, test))
        losses.append(loss_recon(atlas, extract_weights(net)))
    cr = compression_ratio(recon_runs[0][0], atlas).ratio
    elapsed = sum(r[2] for r in recon_runs)
    gap = abs(median(accs) - orig)
    ok = train_acc >= 0.95 and cr > 1 and gap <= 0.01 and median(losses) <= 1e-3 and elapsed < 600
    verdict(4, ok, f"target train {pct(train_acc)} test {pct(orig)}; CR {cr:.3f}; recon accs "
                   f"{[pct(a) for a in accs]} median {pct(median(accs))} (gap {100 * gap:.2f} pt); "
                   f"L_recon median {median(losses):.2e}; {elapsed:.0f}s")


# --------------------------------------------------------------------------- 5


def test_criterion_5_progressive_trend(target, splits):
    _, val, test = splits
    t0 = time.perf_counter()
    reports, _ = progressive_reconstruct(target, 3, TrainConfig(), val, test, seeds=SEEDS, hidden=40,
                                         early_stop=False)
    elapsed = time.perf_counter() - t0
    med = [median(r.seed_accuracies) for r in reports]
    drift = [r.recon_to_original for r in reports]
    ok = (len(reports) == 3 and med[2] >= med[0] and all(b >= a for a, b in zip(drift, drift[1:]))
          and reports[0].cr > 1 and elapsed < 1800)
    verdict(5, ok, f"median test acc by round {[pct(m) for m in med]}; L_recon to original "
                   f"{[f'{d:.3e}' for d in drift]}; CR {reports[0].cr:.3f}; {elapsed:.0f}s")


# --------------------------------------------------------------------------- 6


def test_criterion_6_decoupling_gain(target, splits):
    train, _, test = splits
    atlas = extract_weights(target)
    perm = compute_permutation(atlas, "in_filter")
    t0 = time.perf_counter()
    rec, base, dist = [], [], []
    for seed in SEEDS:
        pred = new_predictor(atlas, target.spec, 14, seed)
        r = fit_recon_only(pred, atlas, perm, TrainConfig(seed=seed))
        rec.append(evaluate(reconstructed_network(r.predictor, target, perm), test))
        b = fit_baseline(pred, target, train, perm, TrainConfig(seed=seed, phase="baseline"))
        base.append(evaluate(reconstructed_network(b.predictor, target, perm), test))
        d = distill_phase(r.predictor, target, target, train, perm, TrainConfig.distill(seed=seed, epochs=150))
        dist.append(evaluate(reconstructed_network(d.predictor, target, perm), test))
    elapsed = time.perf_counter() - t0
    cr = compression_ratio(pred, atlas).ratio
    ok = median(rec) < median(base) and median(dist) >= median(base) + 0.02 and elapsed < 1200
    verdict(6, ok, f"CR {cr:.3f}; median recon-only {pct(median(rec))}, baseline {pct(median(base))}, "
                   f"recon-only + distill {pct(median(dist))} (per seed {[pct(x) for x in dist]}); {elapsed:.0f}s")


# --------------------------------------------------------------------------- 7


def test_criterion_7_high_capacity_teacher(target, splits):
    train, _, test = splits
    t0 = time.perf_counter()
    teacher, _ = train_target(build_target(preset_spec("wide"), 100), train, 40,
                              TargetTrainConfig(lr=1e-2, seed=100, augment_shift=3, augment_noise=0.3))
    atlas = extract_weights(target)
    perm = compute_permutation(atlas, "in_filter")
    same, high = [], []
    for seed in SEEDS:
        r = fit_recon_only(new_predictor(atlas, target.spec, 17, seed), atlas, perm, TrainConfig(seed=seed))
        for tch, out in ((target, same), (teacher, high)):
            d = distill_phase(r.predictor, tch, target, train, perm, TrainConfig.distill(seed=seed))
            out.append(evaluate(reconstructed_network(d.predictor, target, perm), test))
    elapsed = time.perf_counter() - t0
    cr = compression_ratio(r.predictor, atlas).ratio
    t_params, s_params = teacher.spec.total_weights, target.spec.total_weights
    t_acc, s_acc = evaluate(teacher, test), evaluate(target, test)
    ok = (t_params >= 2 * s_params and t_acc >= s_acc + 0.03 and median(high) >= median(same)
          and elapsed < 1200)
    verdict(7, ok, f"teacher {t_params} conv params / {pct(t_acc)} vs target {s_params} / {pct(s_acc)}; "
                   f"CR {cr:.3f}; median same-teacher {pct(median(same))}, high-teacher {pct(median(high))} "
                   f"(per seed {[pct(x) for x in same]} / {[pct(x) for x in high]}); {elapsed:.0f}s")


# --------------------------------------------------------------------------- 8


def test_criterion_8_noise_inputs(target, splits):
    train, _, test = splits
    atlas = extract_weights(target)
    perm = compute_permutation(atlas, "in_filter")
    t0 = time.perf_counter()
    start, after = [], []
    for seed in SEEDS:
        r = fit_recon_only(new_predictor(atlas, target.spec, 14, seed), atlas, perm, TrainConfig(seed=seed))
        start.append(evaluate(reconstructed_network(r.predictor, target, perm), test))
        d = distill_phase(r.predictor, target, target, None, perm, TrainConfig.distill(seed=seed, noise_inputs=True),
                          input_shape=train.images.shape[1:])
        after.append(evaluate(reconstructed_network(d.predictor, target, perm), test))
    elapsed = time.perf_counter() - t0
    cr = compression_ratio(r.predictor, atlas).ratio
    ok = median(after) >= median(start) + 0.01 and elapsed < 900
    verdict(8, ok, f"CR {cr:.3f}; median recon-only {pct(median(start))} -> noise distill {pct(median(after))} "
                   f"(per seed {[pct(x) for x in after]}); {elapsed:.0f}s")


# --------------------------------------------------------------------------- 9


def test_criterion_9_analysis_endpoints(target, splits, recon_runs):
    train, _, test = splits
    t0 = time.perf_counter()
    w_o = extract_weights(target)
    recon = [extract_weights(reconstructed_network(p, target, perm)) for p, perm, _ in recon_runs]
    curve = interpolate_curve(w_o, recon[0], 11, target, test)
    interp_ok = (curve.accuracies[0] == evaluate(target, test)
                 and curve.accuracies[-1] == evaluate(inject_weights(target, recon[0]), test)
                 and curve.errors[0] == 0.0 and abs(curve.errors[-1] - loss_recon(w_o, recon[0])) <= 1e-6)
    sub_train, sub_test = train.subset(np.arange(500)), test.subset(np.arange(500))
    grid = loss_plane(w_o, recon[1], recon[2], 5, target, sub_train, sub_test)
    plane_err = 0.0
    for (_, _, _, tr, te, err), w in zip(grid.anchors, (w_o, recon[1], recon[2])):
        net = inject_weights(target, w)
        plane_err = max(plane_err, abs(tr - mean_loss(net, sub_train)), abs(te - mean_loss(net, sub_test)),
                        abs(err - (1 - evaluate(net, sub_test))))
    fgsm_ok = evaluate(target, fgsm(target, test, 0.0)) == evaluate(target, test)
    prof = delta_profile(recon[0], w_o)
    later = later_half_mean(prof)
    elapsed = time.perf_counter() - t0
    ok = interp_ok and plane_err <= 1e-6 and fgsm_ok and len(prof.delta) == len(w_o) and elapsed < 300
    verdict(9, ok, f"interp endpoints exact: {interp_ok}; plane anchor max dev {plane_err:.1e}; "
                   f"FGSM eps=0 equals clean: {fgsm_ok}; Delta S_ratio later-half mean {later:+.4f} "
                   f"(informational); {elapsed:.0f}s")


# --------------------------------------------------------------------------- 10


def _same_outputs(a, b):
    names = sorted(p.name for p in a.iterdir() if p.suffix in (".csv", ".nwc", ".nwd"))
    if not names or names != sorted(p.name for p in b.iterdir() if p.suffix in (".csv", ".nwc", ".nwd")):
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, names, shallow=False)
    return not mismatch and not errors


def test_criterion_10_manifest_determinism(tmp_path):
    t0 = time.perf_counter()
    first, second = tmp_path / "runs", tmp_path / "again"
    d, tg = first / "data", first / "target" / "target.nwc"
    commands = {
        "data": ["gen-data", "--n-train", "200", "--n-val", "100", "--n-test", "200", "--data-seed", "4"],
        "target": ["train-target", "--data", d, "--epochs", "2"],
        "teacher": ["train-target", "--data", d, "--epochs", "2", "--arch", "small", "--seed", "5"],
        "fit": ["fit", "--mode", "recon_only", "--ckpt", tg, "--data", d, "--hidden", "8", "--epochs", "5"],
        "baseline": ["fit", "--mode", "baseline", "--ckpt", tg, "--data", d, "--hidden", "6", "--epochs", "1"],
        "distill": ["distill", "--ckpt", first / "fit" / "predictor.nwc", "--data", d, "--epochs", "2",
                    "--teacher", first / "teacher" / "target.nwc"],
        "noise": ["distill", "--ckpt", first / "fit" / "predictor.nwc", "--data", d, "--epochs", "2", "--noise"],
        "progressive": ["progressive", "--ckpt", tg, "--data", d, "--rounds", "2", "--seeds", "0,1",
                        "--epochs", "2", "--hidden", "6", "--no-early-stop"],
        "sratio": ["analyze", "sratio", "--ckpt", first / "fit" / "predictor.nwc", "--ref", tg],
        "diff": ["analyze", "diff", "--ckpt", tg, "--ref", first / "fit" / "predictor.nwc"],
        "interp": ["analyze", "interp", "--ckpt", tg, "--ref", first / "fit" / "predictor.nwc", "--data", d,
                   "--points", "4"],
        "plane": ["analyze", "plane", "--ckpt", tg, "--ref", first / "fit" / "predictor.nwc",
                  "--ref2", first / "baseline" / "predictor.nwc", "--data", d, "--grid", "3"],
        "attack": ["attack", "--ckpt", tg, "--data", d, "--eps", "0.05", "--steps", "3"],
    }
    codes = {}
    for name, argv in commands.items():
        codes[name] = run([str(a) for a in argv] + ["--out", str(first / name)])
    codes["report"] = run(["report", "--runs", str(first), "--out", str(tmp_path / "report")])
    second.mkdir()
    for name in commands:
        replay = [_command_of(first / name)] + _mode_of(first / name)
        replay += ["--config", str(first / name / "manifest.cfg"), "--out", str(second / name)]
        codes[name + " (replay)"] = run(replay)
    codes["report (replay)"] = run(["report", "--config", str(tmp_path / "report" / "manifest.cfg"),
                                    "--out", str(tmp_path / "report2")])
    same = {name: _same_outputs(first / name, second / name) for name in commands}
    same["report"] = _same_outputs(tmp_path / "report", tmp_path / "report2")
    elapsed = time.perf_counter() - t0
    bad_codes = {k: v for k, v in codes.items() if v != 0}
    differ = [k for k, v in same.items() if not v]
    verdict(10, not bad_codes and not differ,
            f"{len(same)} runs replayed from manifest.cfg; differing outputs {differ or 'none'}; "
            f"non-zero exits {bad_codes or 'none'}; {elapsed:.0f}s")


def _command_of(run_dir):
    for line in Path(run_dir, "manifest.cfg").read_text().splitlines():
        if line.startswith("command ="):
            return line.split("=", 1)[1].strip()
    raise AssertionError(f"no command in {run_dir}/manifest.cfg")


def _mode_of(run_dir):
    command = _command_of(run_dir)
    if command != "analyze":
        return []
    for line in Path(run_dir, "manifest.cfg").read_text().splitlines():
        if line.startswith("mode ="):
            return [line.split("=", 1)[1].strip()]
    return []
