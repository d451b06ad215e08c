"""Acceptance criteria, one test each; every test prints a PASS/FAIL line.

Criterion 1 trains four PointNet folds and takes most of the suite's
runtime (about 50 minutes on one core). Set ``EMBRYOSTAGE_SKIP_CV=1`` to
skip it during development; it runs by default.
"""
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from embryostage import autodiff as ad
from embryostage.autodiff import Adam, Tensor
from embryostage.pointnet import NormalizationSpec, PointNetRegressor, predict_ensemble, sample_points
from embryostage.reference import ReferenceConfig, generate_reference
from embryostage.simulation import SimConfig, density_profile, simulate, target_count
from embryostage.spatial import SpatialIndex
from embryostage.storage import save_embryo_csv, write_json, write_loss_csv
from embryostage.training import TrainConfig, cross_validate, midpoint_baseline

import oracles

pytestmark = pytest.mark.acceptance

RESULTS_DIR = Path(__file__).resolve().parent.parent / "results"

# desk-scale cross-validation setup (criterion 1)
CV_SEEDS = (1, 2, 3, 4)
CV_CONFIG = TrainConfig(epochs=12, batch_size=16, learning_rate=1e-4, lr_decay=0.3, lr_decay_every=4,
                        sample_size=256, ensemble_runs=25, seed=0)


@pytest.fixture(scope="module")
def reference():
    return generate_reference(ReferenceConfig(n_frames=370, n_start=1500, n_end=6000, seed=0))


@pytest.fixture(scope="module")
def sims(reference):
    """Simulations keyed by (p, seed), computed on demand and cached."""
    cache = {}

    def get(p, seed, strategy="density"):
        key = (p, seed, strategy)
        if key not in cache:
            cache[key] = simulate(reference, SimConfig(p=p, seed=seed), strategy=strategy)
        return cache[key]
    return get


def active_model(seed):
    """A model whose zero-initialized output layers are randomized, so every layer matters."""
    m = PointNetRegressor(seed=seed)
    oracles.randomize_zero_layers(m, np.random.default_rng(seed + 100))
    return m


# -- 2 ---------------------------------------------------------------------------

def test_count_law(reference, sims, report):
    n_ref = reference.counts()
    checked, bad = 0, []
    for p in (0.5, 0.75):
        for seed in (1, 2, 3):
            n_sim = sims(p, seed).counts()
            want = np.empty_like(n_sim)
            want[-1] = target_count(p, n_ref[-1])
            for k in range(len(n_ref) - 2, -1, -1):
                want[k] = min(n_sim[k + 1], target_count(p, n_ref[k]))
            checked += len(n_sim)
            if not np.array_equal(n_sim, want):
                bad.append((p, seed, int(np.flatnonzero(n_sim != want)[0])))
    report(2, not bad, f"count law exact on {checked} frames (p in 0.5, 0.75 x seeds 1-3); violations: {bad}")


# -- 3 ---------------------------------------------------------------------------

def test_density_preservation(reference, sims, report):
    merged = density_profile(sims(0.75, 1), reference, radius=50.0)
    deleted = density_profile(sims(0.75, 1, "random"), reference, radius=50.0)
    ratio = merged / deleted
    worst = int(np.argmax(ratio))
    report(3, bool(np.all(merged <= 2.0 * deleted)),
           f"mean |rho_diff| merge/random ratio over {len(ratio)} frames: max {ratio[worst]:.3f} (frame {worst}), "
           f"median {np.median(ratio):.3f}; merge mean {merged.mean():.3e} vs random {deleted.mean():.3e}")


# -- 4 ---------------------------------------------------------------------------

def _instance(rng):
    n = int(np.exp(rng.uniform(0, np.log(1e4))))
    kind = rng.integers(4)
    if kind == 0:
        pts = rng.uniform(-300, 300, size=(n, 3))
    elif kind == 1:  # clustered
        centers = rng.uniform(-300, 300, size=(max(1, n // 50), 3))
        pts = centers[rng.integers(len(centers), size=n)] + rng.normal(scale=10, size=(n, 3))
    elif kind == 2:  # integer lattice: many exact ties and duplicates
        pts = rng.integers(-6, 7, size=(n, 3)).astype(np.float64) * 10.0
    else:  # points on a sphere shell
        v = rng.normal(size=(n, 3))
        pts = 300 * v / np.linalg.norm(v, axis=1, keepdims=True)
    return pts


def test_spatial_oracle(report):
    rng = np.random.default_rng(2024)
    mismatches, queries, sizes = 0, 0, []
    for _ in range(100):
        pts = _instance(rng)
        n = len(pts)
        sizes.append(n)
        index = SpatialIndex(pts)
        k = int(rng.integers(1, min(n, 20) + 1))
        r = float(rng.choice([10.0, 20.0, 50.0, rng.uniform(1, 150)]))
        extra = rng.uniform(-320, 320, size=(50, 3))
        q = np.vstack([pts, extra])
        self_ids = np.concatenate([np.arange(n), np.full(50, -1)])

        ids, d = index.knn_batch(q, k)
        oid, od = oracles.knn_all(pts, q, k)
        mismatches += int(np.sum(np.any(ids != oid, axis=1) | np.any(d != od, axis=1)))
        if n > k:
            ids, d = index.knn_batch(q, k, exclude=self_ids)
            oid, od = oracles.knn_all(pts, q, k, exclude=self_ids)
            mismatches += int(np.sum(np.any(ids != oid, axis=1) | np.any(d != od, axis=1)))
        mismatches += int(np.sum(index.count_in_radius_batch(q, r) != oracles.count_all(pts, q, r)))
        mismatches += int(np.sum(index.count_in_radius_batch(q, r, exclude=self_ids)
                                 != oracles.count_all(pts, q, r, exclude=self_ids)))
        queries += len(q)
    report(4, mismatches == 0, f"100 instances (n {min(sizes)}..{max(sizes)}), {queries} query points, "
                               f"kNN/excluded kNN/radius counts vs brute force: {mismatches} mismatches")


# -- 5 ---------------------------------------------------------------------------

def _op_cases(rng):
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(3, 5))
    row, col = rng.normal(size=3), rng.normal(size=(4, 1))
    pts = rng.normal(size=(7, 6))  # continuous values: no ties in the max
    w45, w6 = rng.normal(size=(4, 5)), rng.normal(size=6)
    r = rng.normal(size=(4, 3))
    r[np.abs(r) < 1e-3] += 0.1  # keep away from the relu kink
    target = rng.normal(size=4)
    return {
        "add(broadcast)": ([a, row], lambda x, y: ad.sum(ad.mul(ad.add(x, y), ad.add(x, y)))),
        "sub(broadcast)": ([a, col], lambda x, y: ad.sum(ad.mul(ad.sub(x, y), ad.sub(x, y)))),
        "mul(broadcast)": ([a, row], lambda x, y: ad.sum(ad.mul(ad.mul(x, y), x))),
        "relu": ([r], lambda x: ad.sum(ad.mul(ad.relu(x), x))),
        "matmul": ([a, b], lambda x, y: ad.sum(ad.mul(ad.matmul(x, y), w45))),
        "transpose": ([b], lambda x: ad.sum(ad.mul(ad.transpose(x), ad.transpose(x)))),
        "reshape": ([a], lambda x: ad.sum(ad.mul(ad.reshape(x, (2, 6)), ad.reshape(x, (2, 6))))),
        "max_over_points": ([pts], lambda x: ad.sum(ad.mul(ad.max_over_points(x)[0], w6))),
        "sum": ([a], lambda x: ad.mul(ad.sum(x), ad.sum(x))),
        "mean": ([a], lambda x: ad.mul(ad.mean(ad.mul(x, x)), 3.0)),
        "stack": ([row, row[::-1].copy()], lambda x, y: ad.sum(ad.mul(ad.stack([x, y]), ad.stack([y, x])))),
        "mse_loss": ([target], lambda x: ad.mse_loss(x, Tensor(np.arange(4.0)))),
    }


def test_gradients(report):
    rng = np.random.default_rng(5)
    errors = {}
    for name, (arrays, fn) in _op_cases(rng).items():
        leaves = [Tensor(x.copy(), requires_grad=True) for x in arrays]
        fn(*leaves).backward()
        worst = 0.0
        for leaf in leaves:
            def f():
                with ad.no_grad():
                    return fn(*[Tensor(l.data) for l in leaves]).item()
            numeric = oracles.central_difference(f, leaf.data, h=1e-6)
            worst = max(worst, oracles.rel_error(leaf.grad, numeric))
        errors[name] = worst

    model = active_model(11)
    clouds = [rng.normal(size=(12, 3)) * 0.5 for _ in range(2)]
    targets = [6.0, 8.5]

    def loss():
        return model.loss(clouds, targets)[0]

    per_tensor = oracles.model_gradient_errors(model, loss, rng, per_tensor=3, h=1e-6)
    errors["pointnet loss"] = max(per_tensor.values())
    worst_name = max(errors, key=errors.get)
    report(5, max(errors.values()) < 1e-5,
           f"{len(errors) - 1} ops + full loss ({len(per_tensor)} parameter tensors) vs central differences "
           f"(h=1e-6): worst rel. error {errors[worst_name]:.2e} ({worst_name}), pointnet loss "
           f"{errors['pointnet loss']:.2e}")


# -- 6 ---------------------------------------------------------------------------

def test_permutation_invariance(report):
    model = active_model(21)
    rng = np.random.default_rng(6)
    unequal, outputs = 0, []
    for _ in range(50):
        cloud = rng.normal(size=(int(rng.integers(8, 300)), 3)) * rng.uniform(0.2, 1.0)
        base = model.predict(cloud)
        outputs.append(base)
        for _ in range(5):
            unequal += model.predict(cloud[rng.permutation(len(cloud))]) != base
    distinct = len(set(outputs))
    report(6, unequal == 0 and distinct > 1,
           f"50 clouds x 5 permutations: {unequal} unequal outputs; {distinct} distinct outputs across clouds")


# -- 7 ---------------------------------------------------------------------------

def test_overfit_single_batch(reference, report):
    rng = np.random.default_rng(0)
    frames = np.linspace(0, len(reference) - 1, 8).astype(int)
    norm = NormalizationSpec()
    clouds = [norm.apply(sample_points(reference[f].points, 64, rng)) for f in frames]
    targets = [reference.hpf(f) for f in frames]
    model = PointNetRegressor(seed=1)
    model.params["head3.b"].data[:] = np.mean(targets)
    opt = Adam(model.parameters(), lr=1e-3)
    start = time.perf_counter()
    steps = 0
    while steps < 2000:
        opt.zero_grad()
        total, mse = model.loss(clouds, targets)
        if mse.item() < 1e-3:  # current weights already fit; stop before another update
            break
        total.backward()
        opt.step()
        steps += 1
    final = float(np.mean([(model.predict(c) - t) ** 2 for c, t in zip(clouds, targets)]))
    elapsed = time.perf_counter() - start
    report(7, final < 1e-3 and steps <= 2000 and elapsed <= 300,
           f"8 clouds (64 points), ADAM lr 1e-3: MSE {final:.2e} h^2 after {steps} steps in {elapsed:.0f} s")


# -- 8 ---------------------------------------------------------------------------

def _pipeline(workdir: Path):
    def run(*args):
        subprocess.run([sys.executable, "-m", "embryostage", *args, "--threads", "1"], cwd=workdir, check=True,
                       capture_output=True)
    run("gen-reference", "--frames", "40", "--n-start", "300", "--n-end", "900", "--seed", "3", "-o", "ref.csv")
    for s in (1, 2):
        run("simulate", "--ref", "ref.csv", "-p", "0.75", "--seed", str(s), "-o", f"sim{s}.csv")
    run("train", "--data", "sim1.csv", "sim2.csv", "--held-out", "sim2", "--epochs", "2", "--sample-size", "64",
        "--runs", "3", "--seed", "4", "--loss-csv", "loss.csv", "-o", "m.ckpt")
    out = subprocess.run([sys.executable, "-m", "embryostage", "predict", "--model", "m.ckpt", "sim2.csv",
                          "--seed", "5"], cwd=workdir, check=True, capture_output=True)
    (workdir / "pred.txt").write_bytes(out.stdout)
    names = ["ref.csv", "sim1.csv", "sim2.csv", "loss.csv", "m.ckpt", "m.ckpt.bin", "pred.txt"]
    return {n: (workdir / n).read_bytes() for n in names}


def test_determinism(reference, sims, tmp_path, report):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    first, second = _pipeline(tmp_path / "a"), _pipeline(tmp_path / "b")
    differ = [n for n in first if first[n] != second[n]]
    # and at full scale: the 370-frame simulation written twice
    save_embryo_csv(sims(0.75, 1), tmp_path / "full1.csv")
    save_embryo_csv(simulate(reference, SimConfig(p=0.75, seed=1)), tmp_path / "full2.csv")
    if (tmp_path / "full1.csv").read_bytes() != (tmp_path / "full2.csv").read_bytes():
        differ.append("370-frame simulation")
    report(8, not differ, f"two independent CLI pipeline runs (reference, 2 simulations, loss curve, checkpoint, "
                          f"predictions) plus a 370-frame simulation: byte-identical; differing: {differ}")


# -- 9 ---------------------------------------------------------------------------

def test_ensemble_contract(reference, report):
    model = active_model(31)
    points = reference[-1].points
    norm = NormalizationSpec()
    ens = predict_ensemble(model, points, runs=25, seed=9, sample_size=4096, norm=norm)
    # replay the 25 single runs independently
    rng = np.random.default_rng(9)
    replay = np.array([model.predict(norm.apply(sample_points(points, 4096, rng))) for _ in range(25)])
    gap = abs(ens.mean - float(np.mean(ens.runs)))
    report(9, len(ens.runs) == 25 and gap <= 1e-12 and np.array_equal(replay, ens.runs),
           f"runs=25 on {len(points)} points: |mean - mean(runs)| = {gap:.1e}, runs match an independent replay: "
           f"{np.array_equal(replay, ens.runs)}, run spread (std) {ens.std:.3e} h")


# -- 1 ---------------------------------------------------------------------------

@pytest.mark.skipif(os.environ.get("EMBRYOSTAGE_SKIP_CV") == "1", reason="EMBRYOSTAGE_SKIP_CV=1")
def test_desk_scale_cross_validation(reference, sims, report):
    start = time.perf_counter()
    embryos = {f"sim{s}": sims(0.75, s) for s in CV_SEEDS}
    cv = cross_validate(embryos, CV_CONFIG)
    elapsed = time.perf_counter() - start
    pooled = cv.pooled
    baseline = midpoint_baseline(reference)["mae"]

    RESULTS_DIR.mkdir(exist_ok=True)
    write_json({"config": CV_CONFIG.to_dict(), "runtime_s": elapsed, "midpoint_baseline_mae": baseline,
                **cv.to_dict()}, RESULTS_DIR / "cv_report.json")
    write_loss_csv(cv.losses, RESULTS_DIR / "cv_losses.csv")

    folds = ", ".join(f"{f.embryo_id} {f.mae:.3f}" for f in cv.folds)
    print(f"stretch target 0.11 +/- 0.09 h (not gated): got {pooled['mae']:.3f} +/- {pooled['std']:.3f} h")
    report(1, pooled["mae"] < 0.50 and pooled["mae"] < baseline and elapsed <= 2 * 3600,
           f"4-fold CV on 4 simulations (p=0.75): pooled MAE {pooled['mae']:.3f} +/- {pooled['std']:.3f} h, "
           f"RMSD {pooled['rmsd']:.3f} h over {pooled['n']} frames (gate < 0.50, midpoint baseline "
           f"{baseline:.3f}); per fold MAE: {folds}; stretch 0.11 +/- 0.09 h not gated; runtime {elapsed / 60:.1f} min")
