"""End-to-end acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line that is printed in the terminal
summary, then asserts.
"""

import json

import numpy as np
import pytest

from tsdf.cli import RunConfig, main, noise_like, save_models, sweep_tau
from tsdf.fusion import TsdfConfig, compute_poison_mask, craft_tsdf
from tsdf.harness import detector_f1s, forged_ssim, imperceptibility
from tsdf.interruption import InterruptionConfig, craft_interruption, interruption_loss
from tsdf.metrics import detection_f1, frechet_toy, l2mask, psnr, srmask, ssim
from tsdf.numerics import Tensor, evaluate_with_gradients, finite_difference_gradient, no_grad, precision
from tsdf.poisoning import PoisonConfig, craft_poison, poison_total_objective
from tsdf.zoo import Detection

from conftest import CRAFT, EVAL, SEED
from test_interruption import toy_extractor
from test_poisoning import objective_gradcheck

EPS = np.float32(0.05)


def feature_gradcheck(seed):
    rng = np.random.default_rng(10_000 + seed)
    x = rng.uniform(0.2, 0.8, (2, 3, 4, 4))
    W = rng.uniform(-0.05, 0.05, (3, 4, 4))
    ext = [toy_extractor(seed), toy_extractor(seed + 500)]
    cfg = InterruptionConfig()
    with precision(np.float64):
        _, (g,) = evaluate_with_gradients(lambda w: interruption_loss(x, w, ext, cfg), [W])

        def f(w):
            with no_grad():
                return interruption_loss(x, Tensor(w), ext, cfg).item()

        fd = finite_difference_gradient(f, W, 1e-4)
    return np.abs(g - fd).max() / np.abs(fd).max()


def test_1_gradient_oracle(criterion):
    errs = [feature_gradcheck(s) for s in range(100)] + [objective_gradcheck(s) for s in range(100)]
    worst = max(errs)
    ok = criterion("1", worst < 1e-4, f"{len(errs)} cases, max relative error {worst:.2e}")
    assert ok


def test_2_budget_invariants(criterion, interruption_run, tsdf_run):
    _, W_steps = interruption_run
    p, d_steps, _ = tsdf_run
    w = max(np.abs(W).max() for W in W_steps)
    d = max(np.abs(x).max() for x in d_steps)
    f = np.abs(p.delta_final).max()
    ok = w <= EPS and d <= EPS and f <= EPS and len(W_steps) == 50 and len(d_steps) == 20
    assert criterion("2", ok, f"max |W_t| {w:.4f}, max |delta_t| {d:.4f}, |delta_final| {f:.4f}")


def test_3_mask_confinement(criterion, images, models, tsdf_run):
    p, _, _ = tsdf_run
    # tau acts on |W0| relative to the budget
    weak = np.abs(p.W0) / 0.05 < 0.3
    leaked = int(np.count_nonzero(p.delta_poison[~weak]))
    p0 = craft_tsdf(images[CRAFT], *models[::2], TsdfConfig(poison=PoisonConfig(tau=0.0)), W0=p.W0)
    same = p0.delta_final.tobytes() == np.clip(p.W0, -0.05, 0.05).tobytes()
    ok = leaked == 0 and same
    assert criterion("3", ok, f"{leaked} poison elements outside the weak set of {p.W0.size}; tau=0 bitwise {same}")


def test_4_loss_direction(criterion, images, models):
    extractors, _, detectors = models
    rises = falls = 0
    for seed in range(20):
        idx = np.random.default_rng(seed).choice(128, 32, replace=False)
        x = images[CRAFT][np.sort(idx)]
        cfg = InterruptionConfig(iterations=10, batch_size=16, seed=seed)
        init = craft_interruption(x, extractors, InterruptionConfig(gamma=0.0, iterations=1, seed=seed)).data
        W = craft_interruption(x, extractors, cfg).data
        with no_grad():
            rises += interruption_loss(x, W, extractors, cfg).item() > interruption_loss(x, init, extractors, cfg).item()

        mask = compute_poison_mask(W, 0.3, 5.0, 0.05).values
        pc = PoisonConfig(iterations=5)
        delta = craft_poison(x, W, detectors, mask, pc).data

        def J(d):
            xp = np.clip(x + np.clip(W + d, -0.05, 0.05), 0, 1)
            with no_grad():
                return poison_total_objective(xp, x, detectors, mask, pc).item()

        falls += J(delta) < J(np.zeros_like(delta))
    ok = rises >= 19 and falls >= 19
    assert criterion("4", ok, f"L_feature rose in {rises}/20 runs, J fell in {falls}/20 runs")


def test_5_interruption_efficacy(criterion, images, models, tsdf_run):
    p, _, _ = tsdf_run
    gen, x = models[1], images[EVAL]
    s_tsdf = forged_ssim(gen, x, p.delta_final)
    s_noise = forged_ssim(gen, x, noise_like(p.W0.shape, 0.05, SEED))
    ok = s_noise - s_tsdf >= 0.05
    assert criterion("5", ok, f"forgery SSIM tsdf {s_tsdf:.4f} vs noise {s_noise:.4f}")


def test_6_poisoning_efficacy(criterion, images, models, eval_boxes, tsdf_run):
    p, _, _ = tsdf_run
    dets = models[2]
    clean = detector_f1s(dets, images[EVAL], eval_boxes)
    prot = detector_f1s(dets, images[EVAL], eval_boxes, p.delta_final)
    ok = min(clean) >= 0.95 and max(prot) <= 0.85
    detail = f"clean F1 {[round(f, 3) for f in clean]}, protected F1 {[round(f, 3) for f in prot]}"
    assert criterion("6", ok, detail)


def test_7_interruption_only_ablation(criterion, images, models, eval_boxes, W0):
    dets = models[2]
    clean = detector_f1s(dets, images[EVAL], eval_boxes)
    only = detector_f1s(dets, images[EVAL], eval_boxes, np.clip(W0, -0.05, 0.05))
    ok = all(o >= c - 0.02 for o, c in zip(only, clean))
    assert criterion("7", ok, f"clean F1 {[round(f, 3) for f in clean]}, tau=0 F1 {[round(f, 3) for f in only]}")


def test_8a_interruption_only_degrades(criterion, persistence):
    r = persistence[1]
    ok = r.ssim_after >= r.ssim_before + 0.05
    assert criterion("8a", ok, f"interruption-only SSIM {r.ssim_before:.4f} -> {r.ssim_after:.4f}")


def test_8b_tsdf_persists(criterion, persistence):
    r = persistence[2]
    ok = r.crop_yield <= 0.5 and r.ssim_after <= r.ssim_before + 0.02
    detail = f"tsdf crop yield {r.crop_yield:.3f}, SSIM {r.ssim_before:.4f} -> {r.ssim_after:.4f}"
    assert criterion("8b", ok, detail)


def test_9_tau_sweep_ordering(criterion, dataset, models, W0):
    rows = sweep_tau([0.0, 0.5], RunConfig(seed=SEED), models=models, dataset=dataset, W0=W0)
    lo, hi = rows
    f1_ok = hi["f1"] <= lo["f1"]
    l2_ok = lo["l2mask"] >= hi["l2mask"]
    detail = f"F1 {lo['f1']:.4f} -> {hi['f1']:.4f}, L2mask {lo['l2mask']:.5f} -> {hi['l2mask']:.5f} (tau 0 -> 0.5)"
    assert criterion("9", f1_ok and l2_ok, detail)


def test_10_imperceptibility(criterion, images, tsdf_run):
    p, _, _ = tsdf_run
    q = imperceptibility(images[EVAL], p.delta_final)
    ok = q.psnr >= 30 and q.ssim >= 0.85
    assert criterion("10", ok, f"PSNR {q.psnr:.2f} dB, SSIM {q.ssim:.4f}")


def test_11_metric_suite(criterion, rng):
    a = rng.uniform(size=(3, 16, 16))
    b = np.clip(a + rng.normal(0, 0.05, a.shape), 0, 1)
    z = np.zeros((3, 16, 16))
    half = z.copy()
    half[:, 4:12, 4:12] = 0.5
    outside = z.copy()
    outside[:, :, 12:] = 1.0
    gt = [(0, 0, 10, 10)]
    f = rng.normal(size=(10, 4))
    c5, c6 = np.full((3, 8, 8), 0.5), np.full((3, 8, 8), 0.6)
    checks = {
        "l2mask identical": l2mask(a, a, (2, 2, 10, 10)) == 0.0,
        "l2mask 0.25": l2mask(z, half, (4, 4, 12, 12)) == 0.25,
        "l2mask outside": l2mask(z, outside, (0, 0, 10, 10)) == 0.0,
        "srmask 0.5": srmask([0.06, 0.04], 0.05) == 0.5,
        "srmask zeros": srmask([0.0, 0.0]) == 0.0,
        "srmask all": srmask([0.1, 0.2]) == 1.0,
        "psnr cap": psnr(a, a) == 99.0,
        "psnr 20": abs(psnr(z, z + 0.1) - 20.0) < 1e-9,
        "psnr 0": psnr(z, z + 1.0) == 0.0,
        "ssim identity": abs(ssim(a, a) - 1.0) < 1e-12,
        "ssim symmetry": ssim(a, b) == ssim(b, a),
        "ssim constants": abs(ssim(c5, c6) - (0.6 + 1e-4) / (0.61 + 1e-4)) < 1e-12,
        "f1 perfect": detection_f1([Detection(0.9, gt[0])], gt) == 1.0,
        "f1 empty": detection_f1([], gt) == 0.0,
        "f1 2/3": abs(detection_f1([Detection(0.9, gt[0]), Detection(0.8, (40, 40, 50, 50))], gt) - 2 / 3) < 1e-12,
        "frechet identity": frechet_toy(f, f) == 0.0,
    }
    failed = [k for k, v in checks.items() if not v]
    assert criterion("11", not failed, f"{len(checks) - len(failed)}/{len(checks)} examples" + (f", failed {failed}" if failed else ""))


def _cli_run(root, name, argv_tail):
    cfg = {"iters_int": 3, "iters_poi": 2, "retrain_epochs": 1, "model_dir": str(root / "models"), "out": str(root / name)}
    path = root / f"{name}.json"
    path.write_text(json.dumps(cfg))
    for cmd in ("craft", "simulate-retrain"):
        assert main([cmd, "--config", str(path), *argv_tail]) == 0
    out = root / name
    return {f: (out / f).read_bytes() for f in ("perturbation.tsdp", "craft.json", "persistence.json", "persistence.csv")}


def test_12_determinism(criterion, tmp_path, models):
    save_models(tmp_path / "models", *models)
    a = _cli_run(tmp_path, "a", ["--seed", str(SEED)])
    b = _cli_run(tmp_path, "b", ["--seed", str(SEED)])
    differing = [k for k in a if a[k] != b[k]]
    assert criterion("12", not differing, "byte-identical: " + (", ".join(a) if not differing else f"differ {differing}"))
