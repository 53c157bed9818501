"""Acceptance checks, one group per criterion.

The summary at the end of the pytest run prints one PASS/FAIL line per criterion.
Criteria 7 and 8 run the full desk pipeline (3 seeds plus a rerun) and take a while.
"""

import copy
import math
import time

import numpy as np
import pytest
import torch
import torch.nn.functional as F

import oracles
from cardioalign.augment import EcgAugmentConfig, ImageAugmentConfig, augment_ecg_array, augment_image_array
from cardioalign.augment import empirical_pool, ft_surrogate, round_half_up, tabular_corrupt
from cardioalign.cohort import SynthConfig, generate_synthetic_cohort
from cardioalign.config import load_config
from cardioalign.ecg_mae import (EcgModelConfig, MaeConfig, init_mae_model, mae_loss, patchify, random_mask,
                                 reconstruction_loss, train_mae, unpatchify)
from cardioalign.engine import Checkpoint, OptimizerState, ScheduleSpec, cosine_lr, optimizer_step
from cardioalign.finetune_eval import balanced_accuracy, confusion_counts, cross_entropy, roc_auc
from cardioalign.image_ssl import nt_xent
from cardioalign.mm_align import clip_loss
from cardioalign.pipeline import run_pipeline
from cardioalign.preprocess import clean_ecg

E = math.e
criterion = pytest.mark.criterion


def _unit(rng, b, d):
    z = rng.normal(size=(b, d))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# 1. loss oracles
# ---------------------------------------------------------------------------


@criterion(1, "loss oracles within 1e-6 on >=100 random instances, < 30 s")
def test_loss_oracles():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = {"nt_xent": 0.0, "clip": 0.0, "cross_entropy": 0.0, "mae": 0.0}
    for _ in range(100):
        n, d = int(rng.integers(1, 5)), int(rng.integers(2, 9))
        tau = float(rng.uniform(0.05, 1.0))
        z = rng.normal(size=(2 * n, d))
        worst["nt_xent"] = max(worst["nt_xent"], abs(nt_xent(torch.tensor(z), tau).item()
                                                     - oracles.nt_xent(z.tolist(), tau)))

        b = int(rng.integers(2, 9))
        lam = float(rng.uniform(0, 1))
        zs, zi = _unit(rng, b, d), _unit(rng, b, d)
        got = [t.item() for t in clip_loss(torch.tensor(zs), torch.tensor(zi), tau, lam)]
        want = oracles.clip(zs.tolist(), zi.tolist(), tau, lam)
        worst["clip"] = max(worst["clip"], max(abs(g - w) for g, w in zip(got, want)))

        logits = rng.normal(scale=4, size=(b, 2))
        y = rng.integers(0, 2, b)
        worst["cross_entropy"] = max(worst["cross_entropy"], abs(
            cross_entropy(torch.tensor(logits), torch.tensor(y)).item()
            - oracles.cross_entropy(logits.tolist(), y.tolist())))

        pred, target = rng.normal(size=(2, b, d))
        masked = rng.random(b) < 0.6
        masked[0] = True
        worst["mae"] = max(worst["mae"], abs(
            mae_loss(torch.tensor(pred), torch.tensor(target), torch.tensor(masked), lam).item()
            - oracles.mae_loss(pred.tolist(), target.tolist(), masked.tolist(), lam)))
    elapsed = time.perf_counter() - t0
    print(f"max abs deviation {worst}, {elapsed:.2f} s")
    assert all(v <= 1e-6 for v in worst.values()), worst
    assert elapsed < 30


# ---------------------------------------------------------------------------
# 2. closed forms
# ---------------------------------------------------------------------------


@criterion(2, "closed-form anchors for nt_xent and clip_loss")
def test_closed_forms():
    e1, e2 = [1.0, 0.0], [0.0, 1.0]
    z = torch.tensor([e1, e2, e1, e2], dtype=torch.float64)
    assert abs(nt_xent(z, 1.0).item() - (-math.log(E / (E + 2)))) <= 1e-9

    eye = torch.eye(2, dtype=torch.float64)
    assert abs(clip_loss(eye, eye.clone(), tau=1.0, lam=0.5)[0].item() - (-math.log(E / (E + 1)))) <= 1e-9

    rng = np.random.default_rng(0)
    for _ in range(20):
        pair = torch.tensor(rng.normal(size=(2, 5)))
        assert nt_xent(pair, float(rng.uniform(0.05, 2))).item() == 0.0


# ---------------------------------------------------------------------------
# 3. gradient checks
# ---------------------------------------------------------------------------


def _central_diff(f, x, h=1e-6):
    g = torch.zeros_like(x)
    flat, gf = x.view(-1), g.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + h
        up = f(x).item()
        flat[i] = old - h
        down = f(x).item()
        flat[i] = old
        gf[i] = (up - down) / (2 * h)
    return g


def _rel_err(f, x):
    xg = x.clone().requires_grad_(True)
    f(xg).backward()
    num = _central_diff(f, x.clone())
    a = xg.grad
    return float((a - num).norm() / max(a.norm().item(), num.norm().item(), 1e-12))


@criterion(3, "analytic vs finite-difference gradients, rel err <= 1e-4, < 60 s")
def test_gradients():
    t0 = time.perf_counter()
    g = torch.Generator().manual_seed(7)
    worst = 0.0
    for _ in range(5):
        z = torch.randn(6, 4, dtype=torch.float64, generator=g)
        worst = max(worst, _rel_err(lambda x: nt_xent(x, 0.3), z))

        zi = F.normalize(torch.randn(4, 5, dtype=torch.float64, generator=g), dim=1)
        zs = torch.randn(4, 5, dtype=torch.float64, generator=g)
        worst = max(worst, _rel_err(lambda x: clip_loss(F.normalize(x, dim=1), zi, 0.1, 0.5)[0], zs))

        logits = 3 * torch.randn(6, 2, dtype=torch.float64, generator=g)
        y = torch.randint(0, 2, (6,), generator=g)
        worst = max(worst, _rel_err(lambda x: cross_entropy(x, y), logits))

        pred = torch.randn(5, 8, dtype=torch.float64, generator=g)
        target = torch.randn(5, 8, dtype=torch.float64, generator=g)
        m = torch.tensor([True, False, True, True, False])
        worst = max(worst, _rel_err(lambda x: mae_loss(x, target, m, 0.1), pred))
    elapsed = time.perf_counter() - t0
    print(f"worst relative error {worst:.2e}, {elapsed:.2f} s")
    assert worst <= 1e-4
    assert elapsed < 60


# ---------------------------------------------------------------------------
# 4. MAE mechanics
# ---------------------------------------------------------------------------


@criterion(4, "patchify inverse, exact mask counts, 200-step desk MAE halves the loss in < 5 min")
def test_patch_and_mask_mechanics():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(12, 5000)).astype(np.float32)
    assert unpatchify(patchify(x)).tobytes() == x.tobytes()
    for n in (600, 60, 37, 1):
        m = random_mask(n, 0.8, rng)
        assert len(m.masked_indices) == round_half_up(0.8 * n)
        assert sorted(np.concatenate([m.masked_indices, m.visible_indices]).tolist()) == list(range(n))


@criterion(4, "patchify inverse, exact mask counts, 200-step desk MAE halves the loss in < 5 min")
def test_desk_mae_halves_loss():
    cfg = load_config(None, "desk")
    t0 = time.perf_counter()
    data = SynthConfig(**{**cfg["data"], "n": 320})
    cohort = generate_synthetic_cohort(data, 3)
    ecg = np.stack([clean_ecg(s.ecg).samples for s in cohort])
    train, held = ecg[:256], ecg[256:]
    model_cfg = EcgModelConfig(**cfg["ecg_model"])
    mae_cfg = MaeConfig(**{**cfg["mae"], "max_steps": 200})
    before = reconstruction_loss(init_mae_model(train, model_cfg, seed=0), held, mae_cfg)
    res = train_mae(train, model_cfg, mae_cfg, seed=0)
    after = reconstruction_loss(res.modules["model"], held, mae_cfg)
    elapsed = time.perf_counter() - t0
    print(f"held-out masked reconstruction loss {before:.4f} -> {after:.4f} "
          f"(ratio {after / before:.3f}), {elapsed:.0f} s")
    assert after < 0.5 * before
    assert elapsed < 300


# ---------------------------------------------------------------------------
# 5. augmentation invariants
# ---------------------------------------------------------------------------


@criterion(5, "ft_surrogate spectrum, tabular_corrupt pool and count, seeded determinism")
def test_augmentation_invariants():
    rng = np.random.default_rng(5)
    for _ in range(50):
        x = rng.normal(size=int(rng.integers(2, 600)))
        out = ft_surrogate(x, float(rng.uniform(0, 1)), np.random.default_rng(int(rng.integers(1 << 31))))
        a_in, a_out = np.abs(np.fft.rfft(x)), np.abs(np.fft.rfft(out))
        assert np.max(np.abs(a_out - a_in)) <= 1e-6

    for _ in range(50):
        f = int(rng.integers(1, 60))
        table = rng.normal(size=(int(rng.integers(1, 20)), f))
        pool = empirical_pool(table)
        sentinel = np.full_like(table, np.inf)
        out = tabular_corrupt(sentinel, 0.3, pool, np.random.default_rng(int(rng.integers(1 << 31))))
        for row in out:
            changed = np.flatnonzero(np.isfinite(row))
            assert len(changed) == round_half_up(0.3 * f)
            assert all(row[j] in pool[j] for j in changed)

    ecg = rng.normal(size=(12, 500))
    img = rng.uniform(size=(3, 64, 64)).astype(np.float32)
    table = rng.normal(size=(8, 33))
    for seed in range(5):
        r = lambda: np.random.default_rng(seed)
        assert np.array_equal(augment_ecg_array(ecg, EcgAugmentConfig(), r()),
                              augment_ecg_array(ecg, EcgAugmentConfig(), r()))
        assert np.array_equal(augment_image_array(img, ImageAugmentConfig(), r()),
                              augment_image_array(img, ImageAugmentConfig(), r()))
        assert np.array_equal(tabular_corrupt(table, 0.3, empirical_pool(table), r()),
                              tabular_corrupt(table, 0.3, empirical_pool(table), r()))
        assert np.array_equal(ft_surrogate(ecg[0], 0.1, r()), ft_surrogate(ecg[0], 0.1, r()))


# ---------------------------------------------------------------------------
# 6. metrics
# ---------------------------------------------------------------------------


@criterion(6, "roc_auc vs pair counting within 1e-9 (ties), balanced accuracy from counts")
def test_metrics():
    rng = np.random.default_rng(6)
    for i in range(300):
        m = int(rng.integers(2, 51))
        y = rng.integers(0, 2, m)
        y[:2] = [0, 1]
        s = rng.integers(0, 4, m).astype(float) if i % 2 else rng.normal(size=m)
        assert abs(roc_auc(s, y) - oracles.auc_pairs(s.tolist(), y.tolist())) <= 1e-9
        p = rng.integers(0, 2, m)
        c = confusion_counts(p, y)
        assert balanced_accuracy(p, y) == (c["tp"] / (c["tp"] + c["fn"]) + c["tn"] / (c["tn"] + c["fp"])) / 2


# ---------------------------------------------------------------------------
# 7-8. desk pipeline end to end
# ---------------------------------------------------------------------------

SEEDS = (0, 1, 2)


def _desk_seed(root, seed, name=None):
    """Full pipeline with aligned init, then MAE-only and scratch fine-tunes reusing its upstream stages."""
    name = name or f"seed{seed}"
    cfg = load_config(None, "desk", [f"seed={seed}", f'name="{name}"'])
    out = {"align": run_pipeline(cfg, root)["evaluate"]}
    for init in ("mae", "scratch"):
        c = copy.deepcopy(cfg)
        c.update(init=init, stages=["finetune", "evaluate"], upstream=name, name=f"{name}-{init}")
        out[init] = run_pipeline(c, root)["evaluate"]
    return out


@pytest.fixture(scope="module")
def desk_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    t0 = time.perf_counter()
    reports = {seed: _desk_seed(root, seed) for seed in SEEDS}
    return root, reports, time.perf_counter() - t0


@criterion(7, "aligned init beats scratch by >= 0.03 and MAE-only by >= 0.01 test AUC (3 seeds), < 45 min")
def test_transfer_direction(desk_runs):
    _, reports, elapsed = desk_runs
    auc = {init: np.mean([reports[s][init].auc for s in SEEDS]) for init in ("align", "mae", "scratch")}
    for s in SEEDS:
        print(f"seed {s}: " + ", ".join(f"{k} {v.auc:.4f}/{v.balanced_accuracy:.4f}" for k, v in reports[s].items()))
    print(f"mean test AUC {auc}, pipeline time {elapsed / 60:.1f} min")
    assert auc["align"] - auc["scratch"] >= 0.03
    assert auc["align"] - auc["mae"] >= 0.01
    assert elapsed < 45 * 60


@criterion(8, "rerunning the desk pipeline reproduces the final metrics bit for bit")
def test_rerun_is_bitwise_identical(desk_runs, tmp_path):
    root, reports, _ = desk_runs
    cfg = load_config(None, "desk", ["seed=0", 'name="seed0"'])
    again = run_pipeline(cfg, tmp_path)["evaluate"]
    first = reports[0]["align"]
    assert again.to_json() == first.to_json()
    assert (tmp_path / "seed0" / "evaluate" / "roc.csv").read_bytes() == \
        (root / "seed0" / "evaluate" / "roc.csv").read_bytes()


def test_frozen_random_encoders_lose_to_aligned(desk_runs):
    # ablation: untrained encoders kept frozen, only the pool and head learn
    root, _, _ = desk_runs
    cfg = load_config(None, "desk", ["seed=0", 'name="seed0-frozen"', 'init="scratch"',
                                     "finetune.freeze_encoders=true", 'upstream="seed0"',
                                     'stages=["finetune"]'])
    frozen = run_pipeline(cfg, root)["finetune"].checkpoint.best["val_auc"]
    aligned = Checkpoint.load(root / "seed0" / "finetune" / "checkpoint").best["val_auc"]
    print(f"val AUC aligned {aligned:.4f}, frozen random {frozen:.4f}")
    assert frozen < aligned


# ---------------------------------------------------------------------------
# 9. schedule and optimizer
# ---------------------------------------------------------------------------


@criterion(9, "cosine schedule endpoints/midpoint, decoupled-decay fixed point and shrink exact")
def test_schedule_and_optimizer():
    spec = ScheduleSpec(base_lr=1e-3, total_steps=1000, warmup_steps=100)
    assert cosine_lr(0, spec) == 0.0
    assert cosine_lr(100, spec) == 1e-3
    assert cosine_lr(550, spec) == 5e-4
    assert cosine_lr(1000, spec) == 0.0
    for step in (0, 37, 100, 550, 999):
        assert cosine_lr(step, spec) == pytest.approx(oracles.cosine_with_warmup(step, 1e-3, 1000, 100), abs=1e-15)

    # zero gradient and no decay: every step is a fixed point
    p = {"w": torch.tensor([1.5, -2.0, 3.25], dtype=torch.float64)}
    before = p["w"].clone()
    state = OptimizerState(lr=0.01, weight_decay=0.0)
    for _ in range(10):
        optimizer_step(state, p, {"w": torch.zeros(3, dtype=torch.float64)})
    assert torch.equal(p["w"], before)

    # zero gradient with decay: exactly (1 - lr * wd) per step
    lr, wd = 0.1, 0.5
    p = {"w": torch.tensor([1.0, -2.0, 3.5], dtype=torch.float64)}
    want = p["w"].clone()
    state = OptimizerState(lr=lr, weight_decay=wd)
    for _ in range(5):
        optimizer_step(state, p, {"w": torch.zeros(3, dtype=torch.float64)})
        want = want * (1 - lr * wd)
        assert torch.equal(p["w"], want)
