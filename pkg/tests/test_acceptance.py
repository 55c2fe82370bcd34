"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

Criteria 5 to 9 read the phantom benchmark under ``$MORPHLDM_BENCH``
(default ``<repo>/bench``). Missing artifacts are produced by
``run_benchmark``, which takes a few CPU hours from scratch and is a no-op
once everything is cached.
"""

from __future__ import annotations

import csv
import json
import math
import os
import shutil
import time
from pathlib import Path

import numpy as np
import pytest
import torch
import yaml

from conftest import ACCEPTANCE, TINY_NET
from morphldm.benchmark import Budget, run_benchmark
from morphldm.cli import main
from morphldm.diffusion import ddpm_sample, make_schedule, predict_x0, q_sample
from morphldm.evaluation import cohens_d, fd_phantom
from morphldm.fields import apply_deformation, identity_grid, jacobian_determinant_map, warp_labels
from morphldm.losses import Stage1Weights, adversarial_losses, kl_to_standard_normal, stage1_objective
from morphldm.nets import DiffusionUNet, NetConfig, encode_condition
from morphldm.phantoms import REGION_NAMES

REPO = Path(__file__).resolve().parents[1]


def record(n: int, checks: dict[str, bool], detail: str) -> None:
    """Store the verdict for the summary and fail with the broken checks."""
    failed = [k for k, ok in checks.items() if not ok]
    ACCEPTANCE[n] = (not failed, detail + (f" [failed: {', '.join(failed)}]" if failed else ""))
    print(f"{'PASS' if not failed else 'FAIL'} criterion {n}: {ACCEPTANCE[n][1]}")
    assert not failed, ACCEPTANCE[n][1]


def gen(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed)


# --------------------------------------------------------------------------
# property suites


def test_criterion_1_field_math():
    t0 = time.perf_counter()
    g = gen(0)
    img = torch.rand(2, 1, 24, 20, generator=g)
    zero = torch.zeros(2, 2, 24, 20)
    identity_err = (apply_deformation(img, zero) - img).abs().max().item()

    labels = torch.randint(0, len(REGION_NAMES), (2, 24, 20), generator=g)
    warped = warp_labels(labels, zero)
    vol = lambda lab: torch.stack([torch.bincount(x.flatten(), minlength=len(REGION_NAMES)) for x in lab])  # noqa: E731
    labels_exact = torch.equal(warped, labels) and torch.equal(vol(warped), vol(labels))

    x, y = torch.rand(2, 1, 2, 24, 20, generator=g)
    u = 2 * torch.randn(1, 2, 24, 20, generator=g)
    lin_err = (apply_deformation(0.7 * x - 1.3 * y, u) - (0.7 * apply_deformation(x, u) - 1.3 * apply_deformation(y, u)))
    lin_err = lin_err.abs().max().item()

    grid = identity_grid((10, 10), dtype=torch.float64)
    det = jacobian_determinant_map((0.1 * (grid - 4.5)).unsqueeze(0))
    jac_err = (det[0, 1:-1, 1:-1] - 1.21).abs().max().item()
    elapsed = time.perf_counter() - t0
    record(1, {
        "identity <= 1e-6": identity_err <= 1e-6,
        "label volumes exact": labels_exact,
        "linearity <= 1e-5": lin_err <= 1e-5,
        "dilation det 1.21 <= 1e-3": jac_err <= 1e-3,
        "runtime < 60s": elapsed < 60,
    }, f"identity {identity_err:.1e}, linearity {lin_err:.1e}, dilation {jac_err:.1e}, {elapsed:.2f}s")


def _central_difference(f, param: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    numeric = torch.zeros_like(param)
    flat = param.detach().reshape(-1)
    for i in range(flat.numel()):
        plus, minus = flat.clone(), flat.clone()
        plus[i] += h
        minus[i] -= h
        numeric.view(-1)[i] = (f(plus.view_as(param)) - f(minus.view_as(param))) / (2 * h)
    return numeric


def test_criterion_2_gradients():
    t0 = time.perf_counter()
    rand = lambda *s, seed: torch.randn(*s, generator=gen(seed), dtype=torch.float64)  # noqa: E731
    x = torch.rand(1, 1, 6, 6, generator=gen(1), dtype=torch.float64)
    mu, lv = rand(1, 2, 3, 3, seed=2), rand(1, 2, 3, 3, seed=3)
    worst = {}
    for units in ("voxel", "normalized"):
        w = Stage1Weights(alpha=5.0, beta=1.0, kl_weight=1e-2, displacement_units=units)

        def objective(theta, u):
            recon = apply_deformation(torch.sigmoid(theta), u)
            return stage1_objective(x, recon, w, mu, lv, field=u)[0]

        theta = rand(1, 1, 6, 6, seed=4).requires_grad_()
        u = (0.9 * rand(1, 2, 6, 6, seed=5)).requires_grad_()
        g_theta, g_u = torch.autograd.grad(objective(theta, u), (theta, u))
        n_theta = _central_difference(lambda p: objective(p, u.detach()), theta)
        n_u = _central_difference(lambda p: objective(theta.detach(), p), u)
        worst[f"template/{units}"] = ((g_theta - n_theta).norm() / n_theta.norm()).item()
        worst[f"displacement/{units}"] = ((g_u - n_u).norm() / n_u.norm()).item()
    elapsed = time.perf_counter() - t0
    checks = {f"{k} < 1e-4": v < 1e-4 for k, v in worst.items()}
    checks["runtime < 120s"] = elapsed < 120
    record(2, checks, f"max relative error {max(worst.values()):.1e}, {elapsed:.2f}s")


def test_criterion_3_diffusion():
    t0 = time.perf_counter()
    sched = make_schedule(250)
    abar = sched.alpha_bars
    monotone = bool((abar[1:] < abar[:-1]).all()) and 0 < abar[-1] < abar[0] < 1

    z0 = torch.randn(100_000, generator=gen(1), dtype=torch.float64)
    eps = torch.randn(100_000, generator=gen(2), dtype=torch.float64)
    var_err = max(abs(q_sample(z0, t, eps, sched).var().item() - 1) for t in (0, 60, 125, 249))

    target = torch.randn(4, 8, 4, 4, generator=gen(3), dtype=torch.float64)
    e = torch.randn(target.shape, generator=gen(4), dtype=torch.float64)
    recover_err = max((predict_x0(q_sample(target, t, e, sched), t, e, sched) - target).abs().max().item()
                      for t in range(0, 250, 7))

    cfg = NetConfig(**TINY_NET)
    torch.manual_seed(0)
    unet = DiffusionUNet(cfg, T=20).eval()
    torch.nn.init.normal_(unet.conv_out.weight, std=0.02)
    small = make_schedule(20)
    c = encode_condition([30.0, 80.0], [0, 1])
    shape = (2, cfg.latent_channels, *cfg.latent_size)
    draw = lambda seed: ddpm_sample(lambda z, t, _: unet(z, t, c), c, small, gen(seed), shape)  # noqa: E731
    a, b, other = draw(5), draw(5), draw(6)
    deterministic = torch.equal(a, b) and not torch.equal(a, other)
    elapsed = time.perf_counter() - t0
    record(3, {
        "alpha_bar monotone": monotone,
        "variance within 5%": var_err <= 0.05,
        "x0 recovery <= 1e-5": recover_err <= 1e-5,
        "seeded sampler deterministic": deterministic,
        "runtime < 120s": elapsed < 120,
    }, f"variance error {var_err:.3f}, x0 error {recover_err:.1e}, {elapsed:.2f}s")


def test_criterion_4_closed_forms():
    t0 = time.perf_counter()
    zeros = torch.zeros(3, 4)
    kl0 = kl_to_standard_normal(zeros, zeros).item()
    kl1 = kl_to_standard_normal(torch.ones(3, 4), zeros).item()
    # confident discriminator: both hinge terms saturate at zero
    _, d_loss = adversarial_losses(torch.full((2, 1, 3, 3), 1.5), torch.full((2, 1, 3, 3), -2.0))

    rng = np.random.default_rng(0)
    a, b = rng.normal(0, 1, 50), rng.normal(0.5, 1, 70)
    na, nb = len(a), len(b)
    pooled = math.sqrt(((na - 1) * a.var(ddof=1) + (nb - 1) * b.var(ddof=1)) / (na + nb - 2))
    d_err = abs(cohens_d(a, b) - abs(a.mean() - b.mean()) / pooled)
    scale_err = abs(cohens_d(7.3 * a - 2, 7.3 * b - 2) - cohens_d(a, b))
    feats = rng.normal(size=(200, 8))
    fd_same = fd_phantom(feats, feats.copy())
    elapsed = time.perf_counter() - t0
    record(4, {
        "KL(0,0) = 0": kl0 == 0.0,
        "KL(1,0) = 0.5": abs(kl1 - 0.5) <= 1e-12,
        "hinge saturates": d_loss.item() == 0.0,
        "Cohen's d closed form <= 1e-9": d_err <= 1e-9,
        "Cohen's d scale invariant <= 1e-9": scale_err <= 1e-9,
        "FD identical <= 1e-6": fd_same <= 1e-6,
        "runtime < 60s": elapsed < 60,
    }, f"d error {d_err:.1e}, scale error {scale_err:.1e}, FD {fd_same:.1e}, {elapsed:.2f}s")


# --------------------------------------------------------------------------
# phantom benchmark


@pytest.fixture(scope="module")
def bench() -> Path:
    root = Path(os.environ.get("MORPHLDM_BENCH", REPO / "bench"))
    budget = Budget()
    if (root / "budget.json").exists():
        saved = json.loads((root / "budget.json").read_text())
        saved["variants"] = tuple(saved["variants"])
        budget = Budget(**saved)
    run_benchmark(root, budget)
    return root


def report(bench: Path, name: str) -> dict:
    return json.loads((bench / "reports" / name / "report.json").read_text())


def region_d(bench: Path, name: str) -> dict[str, float]:
    with open(bench / "reports" / name / "regions.csv") as fh:
        return {r["region"]: float(r["cohens_d"]) for r in csv.DictReader(fh)}


@pytest.mark.slow
def test_criterion_5_end_to_end_smoke(bench):
    budget = json.loads((bench / "budget.json").read_text())
    stage1 = json.loads((bench / "runs" / "morphldm_c" / "stage1" / "meta.json").read_text())
    cfg = yaml.safe_load((bench / "configs" / "morphldm_c.yaml").read_text())
    with open(bench / "runs" / "morphldm_c" / "stage2" / "loss.csv") as fh:
        rows = [(int(r["step"]), float(r["denoising"])) for r in csv.DictReader(fh)]
    # single-batch losses are noisy, so judge a running mean of 4 logged values
    window = 4
    early = [v for s, v in rows if s <= 2000]
    smoothed = [float(np.mean(early[i : i + window])) for i in range(len(early) - window + 1)]
    timings = json.loads((bench / "timings.json").read_text())
    hours = sum(timings[k] for k in ("gen-data/train", "stage1/morphldm_c", "stage2/morphldm_c")) / 3600
    l1 = stage1["heldout_l1"]
    record(5, {
        "2000 phantoms at 64x64": budget["n_train"] == 2000 and stage1["config"]["net"]["image_size"] == [64, 64],
        "held-out L1 < 0.05": l1 < 0.05,
        "stage 1 within 20k steps": stage1["step"] <= 20_000 and cfg["stage1"]["steps"] <= 20_000,
        "denoising < 0.9 within 2k steps": min(smoothed) < 0.9,
        "runtime <= 6h CPU": hours <= 6,
    }, f"held-out L1 {l1:.4f} at step {stage1['step']}, best smoothed denoising loss by step 2000 "
       f"{min(smoothed):.3f}, {hours:.2f}h")


@pytest.mark.slow
def test_criterion_6_attribute_ordering(bench):
    m, b = report(bench, "morphldm_c"), report(bench, "ldm")
    mae_m, mae_b = m["metrics"]["age_mae"], b["metrics"]["age_mae"]
    acc_m, acc_b = m["metrics"]["sex_acc"], b["metrics"]["sex_acc"]
    record(6, {
        "500 samples each": m["counts"]["synthetic"] == b["counts"]["synthetic"] == 500,
        "age MAE >= 10% lower": mae_m <= 0.9 * mae_b,
        "sex accuracy >= baseline": acc_m >= acc_b,
    }, f"age MAE {mae_m:.2f} vs {mae_b:.2f}, sex acc {acc_m:.3f} vs {acc_b:.3f}")


@pytest.mark.slow
def test_criterion_7_morphometry(bench):
    m, b, ctrl = region_d(bench, "morphldm_c"), region_d(bench, "ldm"), region_d(bench, "real_control")
    wins = sum(m[r] <= b[r] for r in m)
    record(7, {
        "ventricle |d| < 0.5": m["ventricle"] < 0.5,
        "<= baseline on half the regions": wins >= math.ceil(len(m) / 2),
        "real-vs-real < 0.1": max(ctrl.values()) < 0.1,
    }, "d morphldm_c " + ", ".join(f"{r} {m[r]:.3f}" for r in m)
       + " | ldm " + ", ".join(f"{r} {b[r]:.3f}" for r in b)
       + f" | control max {max(ctrl.values()):.3f}")


@pytest.mark.slow
def test_criterion_8_diversity(bench):
    m = report(bench, "morphldm_c")
    synth, real = m["metrics"]["ms_ssim"], m["real_reference"]["ms_ssim"]
    record(8, {
        "1000 pairs": m["counts"]["pairs"] == 1000,
        "within 0.10 of real": abs(synth - real) <= 0.10,
        "non-collapse < 0.99": synth < 0.99,
    }, f"synthetic MS-SSIM {synth:.3f}, real {real:.3f}")


@pytest.mark.slow
def test_criterion_9_decades(bench):
    def decades(name):
        with open(bench / "reports" / name / "decade_mae.csv") as fh:
            return {int(r["decade_start"]): float(r["synthetic_mae"]) for r in csv.DictReader(fh)}

    m, b = decades("morphldm_c"), decades("ldm")
    oldest = max(m)
    record(9, {
        "CSV covers every decade": sorted(m) == sorted(b) == list(range(0, 100, 10)),
        "oldest decade <= baseline": m[oldest] <= b[oldest],
    }, f"decade {oldest}-{oldest + 10}: {m[oldest]:.2f} vs {b[oldest]:.2f}")


# --------------------------------------------------------------------------
# reproducibility


def _tree(path: Path) -> dict[str, bytes]:
    return {p.relative_to(path).as_posix(): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


def _all_commands(work: Path) -> None:
    """Every CLI command at tiny scale, each output under ``work``."""
    spec = work / "spec.yaml"
    spec.write_text("image_size: [32, 32]\n")
    steps = {"batch_size": 4, "lr": 1e-3, "warmup": 1, "log_every": 1, "checkpoint_every": 2}
    assert main(["gen-data", "--spec", str(spec), "--n", "60", "--out", str(work / "train"), "--seed", "1"]) == 0
    assert main(["gen-data", "--spec", str(spec), "--n", "120", "--out", str(work / "val"), "--seed", "2",
                 "--age-dist", "uniform"]) == 0
    assert main(["train-predictor", "--data", str(work / "train"), "--out", str(work / "pred"), "--steps", "3"]) == 0
    for variant in ("morphldm_c", "ldm"):
        cfg = work / f"{variant}.yaml"
        cfg.write_text(yaml.safe_dump({
            "variant": variant, "dataset": str(work / "train"), "val_dataset": str(work / "val"),
            "output": str(work / "runs" / variant), "seed": 1, "heldout_size": 8, "net": TINY_NET,
            "schedule": {"T": 10}, "stage1": {**steps, "steps": 4},
            "stage2": {**steps, "steps": 4, "batch_size": 8, "calibration_size": 16},
        }))
        assert main(["train", "--stage", "1", "--config", str(cfg), "--max-steps", "2"]) == 0
        assert main(["train", "--stage", "1", "--config", str(cfg), "--resume"]) == 0
        assert main(["train", "--stage", "2", "--config", str(cfg)]) == 0
        assert main(["sample", "--config", str(cfg), "--n", "100", "--seed", "2",
                     "--out", str(work / "samples" / variant)]) == 0
        assert main(["eval", "--real", str(work / "val"), "--synth", str(work / "samples" / variant),
                     "--predictor", str(work / "pred"), "--out", str(work / "reports" / variant),
                     "--pairs", "30", "--scales", "2"]) == 0


def test_criterion_10_reproducibility(tmp_path):
    # both runs use the same paths so even recorded configs must match
    work = tmp_path / "work"
    work.mkdir()
    _all_commands(work)
    first = _tree(work)
    shutil.rmtree(work)
    work.mkdir()
    _all_commands(work)
    second = _tree(work)
    differing = sorted(k for k in first.keys() | second.keys() if first.get(k) != second.get(k))
    record(10, {
        "byte-identical": not differing,
    }, f"{len(first)} files compared" + (f", differing: {differing[:5]}" if differing else ""))
