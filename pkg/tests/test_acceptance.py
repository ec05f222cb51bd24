"""End-to-end acceptance checks, one verdict line per criterion."""

import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from specband.attention import AttentionCnnConfig, build_model, extract_heatmap, train
from specband.data import balanced_split, load_cube, load_ground_truth, synth_cube, to_pixels
from specband.harness import (
    ConfusionMatrix,
    ExperimentConfig,
    average_accuracy,
    band_selection_pipeline,
    confusion,
    kappa,
    monte_carlo,
)
from specband.selection import Heatmap, chi2_quantile_1dof, mcd_1d, select_bands
from oracles import brute_force_mcd, chi2_1_quantile_bisect

TESTS = Path(__file__).parent
PLANTED = {5, 13, 27}
LAMBDAS = (0.01, 0.02, 0.03, 0.04, 0.05)


def synthetic_pixels(seed):
    return to_pixels(*synth_cube(32, 3, sorted(PLANTED), sigma=0.05, rows=30, cols=60, seed=seed))


def test_gradient_suite(verdict):
    t0 = time.perf_counter()
    proc = subprocess.run(
        [sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", "-k", "gradient",
         str(TESTS / "test_nn.py"), str(TESTS / "test_attention.py")],
        capture_output=True, text=True, cwd=TESTS.parent,
    )
    elapsed = time.perf_counter() - t0
    summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr
    verdict("gradient suite", proc.returncode == 0 and elapsed < 30,
            f"{summary} (wall {elapsed:.1f}s, limit 30s)")


def test_shape_contract(verdict):
    shapes = {}
    for b in (103, 204):
        model = build_model(AttentionCnnConfig(num_blocks=2, num_classes=4), b)
        shapes[b] = model.forward(np.random.default_rng(b).random((1, b))).z[0].shape[1:]
    ok = shapes[103] == (51, 96) and shapes[204] == (102, 96)
    verdict("shape contract", ok, f"b=103 -> {shapes[103]}, b=204 -> {shapes[204]}")


def test_probability_invariants(verdict):
    rng = np.random.default_rng(0)
    worst = 0.0
    for i in range(100):
        blocks = 2 + i % 3
        b = int(rng.integers(16, 48))
        model = build_model(AttentionCnnConfig(num_blocks=blocks, num_classes=int(rng.integers(2, 6)),
                                               channels=(8, 6, 5, 4), hidden=(12, 8), seed=i), b)
        x = rng.random((int(rng.integers(1, 6)), b)) * rng.uniform(0.1, 10)
        rec = model.forward(x)
        sums = [rec.output.sum(axis=1)] + [z.sum(axis=1) for z in rec.z_hat]
        sums.append(np.array([extract_heatmap(model, x).scores.sum()]))
        worst = max(worst, max(float(np.abs(s - 1).max()) for s in sums))
    verdict("probability invariants", worst < 1e-6, f"max |sum - 1| = {worst:.2e} over 100 forwards")


def test_mcd_oracle(verdict):
    rng = np.random.default_rng(2024)
    mismatches = 0
    for _ in range(200):
        n = int(rng.integers(2, 21))
        h = int(rng.integers(2, n + 1))
        x = rng.normal(size=n) * rng.uniform(0.1, 5)
        if rng.random() < 0.3:
            x[rng.integers(0, n)] += 50
        fit = mcd_1d(x, h)
        var, mu, _ = brute_force_mcd(x, h)
        if not (np.isclose(fit.raw_var, var, rtol=1e-12, atol=1e-14)
                and np.isclose(fit.mu, mu, rtol=1e-12, atol=1e-12)):
            mismatches += 1
    verdict("MCD oracle", mismatches == 0, f"{mismatches} mismatches in 200 instances (n <= 20)")


def test_chi2_quantile(verdict):
    q95, q50 = chi2_quantile_1dof(0.95), chi2_quantile_1dof(0.5)
    ok = (abs(q95 - 3.8415) <= 1e-3 and abs(q50 - 0.4549) <= 1e-3
          and abs(q95 - chi2_1_quantile_bisect(0.95)) <= 1e-3
          and abs(q50 - chi2_1_quantile_bisect(0.5)) <= 1e-3)
    verdict("chi-square quantile", ok, f"q(0.95)={q95:.5f}, q(0.5)={q50:.5f}")


def test_metrics(verdict):
    diag = ConfusionMatrix(np.diag([7, 3, 5]))
    k_diag, aa_diag = kappa(diag), average_accuracy(diag)[1]
    k_06 = kappa(ConfusionMatrix(np.array([[40, 10], [10, 40]])))
    rng = np.random.default_rng(0)
    n = 10_000
    k_ind = kappa(confusion(rng.integers(0, 2, n), np.arange(n) % 2, 2))
    ok = k_diag == 1.0 and aa_diag == 1.0 and k_06 == 0.6 and abs(k_ind) < 0.03
    verdict("metrics", ok, f"diag kappa={k_diag}, AA={aa_diag}; kappa(0.8,0.5)={k_06}; "
                           f"independent kappa={k_ind:+.4f}")


def test_planted_band_recovery(verdict):
    t0 = time.perf_counter()
    hits = []
    for master in range(5):
        cfg = ExperimentConfig(runs=3, architectures=("2A",), lambdas=(0.05,), eval_reduced=False,
                               base_seed=1000 * master)
        res = band_selection_pipeline(cfg, synthetic_pixels(master))
        selected = set(res.selections[0.05].selected.tolist())
        hits.append(len(selected & PLANTED))
    elapsed = time.perf_counter() - t0
    good = sum(h >= 2 for h in hits)
    verdict("planted-band recovery", good >= 4 and elapsed < 300,
            f"planted hits per master seed {hits}; {good}/5 seeds with >= 2 (need 4); "
            f"{elapsed:.0f}s (limit 300s)")


def test_attention_parity(verdict):
    cfg = ExperimentConfig(runs=10, architectures=("2", "2A"), eval_reduced=False)
    agg = monte_carlo(cfg, synthetic_pixels(0)).aggregate
    plain, att = agg["CNN-2"]["aa_mean"], agg["CNN-2A"]["aa_mean"]
    verdict("attention parity", abs(plain - att) < 0.02,
            f"mean AA CNN-2={plain:.4f}, CNN-2A={att:.4f}, |diff|={abs(plain - att):.4f}")


def test_early_stopping(verdict):
    px = synthetic_pixels(3)
    split = balanced_split(px, 0)
    x, y = split.subset(px, "train")
    xv, yv = split.subset(px, "validation")
    lo, hi = x.min(axis=0), x.max(axis=0)
    x, xv = (x - lo) / (hi - lo), (xv - lo) / (hi - lo)
    model = build_model(AttentionCnnConfig(num_blocks=2, num_classes=3, channels=(8, 6, 4, 4),
                                           hidden=(16, 8), seed=0, dtype="float32"), 32)
    model, hist = train(model, x, y, xv, yv, patience=25, max_epochs=200, seed=0)
    restored = float(np.mean(model.predict(xv) == yv))
    ok = hist.stopped_early and hist.epochs == hist.best_epoch + 25 and restored == hist.best_val_acc
    verdict("early stopping", ok, f"best epoch {hist.best_epoch}, stopped at {hist.epochs}; "
                                  f"restored val acc {restored:.4f} vs best {hist.best_val_acc:.4f}")


def test_lambda_nesting(verdict):
    rng = np.random.default_rng(5)
    broken = 0
    for i in range(300):
        b = int(rng.integers(5, 220))
        s = rng.gamma(rng.uniform(0.3, 5), size=b)
        if i % 3 == 0:
            s[rng.choice(b, size=max(1, b // 10), replace=False)] *= rng.uniform(2, 20)
        h = Heatmap.from_scores(s)
        sets = [set(select_bands(h, lam).selected.tolist()) for lam in LAMBDAS]
        broken += any(not a <= b_ for a, b_ in zip(sets, sets[1:]))
    verdict("lambda nesting", broken == 0, f"{broken} non-nested sweeps out of 300 heatmaps")


REAL_DATA = [
    ("Salinas", "SPECBAND_SALINAS", 54_129, (1440, 1520)),
    ("Pavia", "SPECBAND_PAVIA", 42_776, (830, 870)),
]


@pytest.mark.parametrize("name,env,total,window", REAL_DATA, ids=[r[0] for r in REAL_DATA])
def test_reference_scene_counts(verdict, name, env, total, window):
    """Set ``SPECBAND_<SCENE>=cube.bin:gt.bin`` to enable."""
    paths = os.environ.get(env)
    if not paths:
        pytest.skip(f"{env} not set")
    cube_path, gt_path = paths.split(":", 1)
    cube = load_cube(cube_path)
    px = to_pixels(cube, load_ground_truth(gt_path, cube.rows, cube.cols))
    test_size = len(balanced_split(px, 0).test)
    ok = len(px) == total and window[0] <= test_size <= window[1]
    verdict(f"{name} counts", ok, f"{len(px)} labelled pixels (expect {total}); "
                                  f"test split {test_size} in {list(window)}")
