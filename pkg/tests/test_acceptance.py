"""Acceptance criteria 1-10, one test each, each printing a PASS/FAIL line."""

import itertools
import json
import math
import random
import time

import numpy as np
import pytest

from gren import cli, evalkit, objective, phash, trainer
from gren.diffcore import Tensor
from gren.synthgen import SceneSpec, generate_sample, sample_seed

TOY = {"seed": 5, "data": {"train_size": 16, "eval_size": 8}}


def write_config(path, doc):
    path.write_text(json.dumps(doc, indent=2))
    return path


def test_criterion_01_gradient_fidelity(criterion):
    config, _ = cli.load_config(None)
    start = time.process_time()
    results = cli.cmd_gradcheck(config, ("hash", "cosine"), step=1e-5)
    elapsed = time.process_time() - start
    worst = max(max(errs.values()) for errs in results.values())
    detail = ", ".join(f"{mode} max {max(errs.values()):.2e}" for mode, errs in results.items())
    ok = worst < 1e-4 and elapsed < 60
    assert criterion(1, "gradient fidelity", ok, f"{detail}, step 1e-5, {elapsed:.1f}s CPU")


def test_criterion_02_phash_affine_invariance(criterion):
    rng = np.random.default_rng(2)
    failures = 0
    for i in range(50):
        img = generate_sample(sample_seed(202, i)).image
        lo, hi = img.min(), img.max()
        base = phash.phash64(img)
        for _ in range(10):
            a = rng.uniform(0.05, 1.0 / (hi - lo))
            c = rng.uniform(-a * lo, 1.0 - a * hi)   # a*img + c stays inside [0, 1]
            failures += phash.hamming(base, phash.phash64(a * img + c)) != 0
    assert criterion(2, "pHash affine invariance", failures == 0, f"{failures} of 500 pairs differ")


def test_criterion_03_hash_metric_axioms(criterion):
    rnd = random.Random(3)
    violations = 0
    for i in range(1000):
        a, b, c = (rnd.getrandbits(64) for _ in range(3))
        if i % 10 == 0:
            b = a
        violations += phash.hamming(a, a) != 0
        violations += (phash.hamming(a, b) == 0) != (a == b)
        violations += phash.hamming(a, b) != phash.hamming(b, a)
        violations += phash.hamming(a, c) > phash.hamming(a, b) + phash.hamming(b, c)
    assert criterion(3, "hash metric axioms", violations == 0, f"{violations} violations over 1000 triples")


def test_criterion_04_mil_oracle(criterion):
    rng = np.random.default_rng(4)
    eps, worst = 1e-6, 0.0
    for _ in range(100):
        h, w = rng.integers(1, 5, size=2)
        p = rng.random((1, h, w))
        y = int(rng.integers(0, 2))
        prod = 1.0
        for v in p.ravel():
            prod *= 1.0 - min(max(v, eps), 1.0 - eps)
        direct = -math.log(1.0 - prod) if y else -math.log(prod)
        worst = max(worst, abs(objective.mil_loss(Tensor(p), y, 0).item() - direct))
    assert criterion(4, "MIL log-space vs direct product", worst <= 1e-9, f"max abs diff {worst:.2e} on 100 grids")


def test_criterion_05_objective_collapse(criterion, tmp_path):
    cfg = write_config(tmp_path / "c.json", {**TOY, "objective": {"lambda1": 0.0, "lambda2": 0.0}})
    config, raw = cli.load_config(str(cfg))
    _, log_path = cli.cmd_train(config, str(tmp_path / "run"), raw)
    log = [json.loads(line) for line in log_path.read_text().splitlines()]
    epochs = {r["epoch"] for r in log}
    mismatched = sum(r["Q"] != r["L"] for r in log)
    ok = mismatched == 0 and epochs == set(range(9))
    assert criterion(5, "objective collapse", ok, f"{mismatched} of {len(log)} steps with Q != L over 9 epochs")


def test_criterion_06_region_and_iou_oracles(criterion):
    rng = np.random.default_rng(6)
    mismatches = 0
    for i in range(200):
        s = generate_sample(sample_seed(606, i), SceneSpec(annotated_fraction=1.0))
        probs = rng.random((2, 16, 16)) ** 3
        labels = objective.rasterize_box_labels(s.boxes, 2)
        for k in range(2):
            region = evalkit.grid_to_region(probs, k)
            oracle_region = np.zeros((128, 128), bool)
            gt = np.zeros((128, 128), bool)
            for b in s.boxes:
                if b.k == k:
                    gt[b.y0:b.y1 + 1, b.x0:b.x1 + 1] = True
            oracle_cells = np.zeros((16, 16), bool)
            for y in range(128):
                for x in range(128):
                    oracle_region[y, x] = probs[k, y // 8, x // 8] > 0.5
                    if gt[y, x]:
                        oracle_cells[y // 8, x // 8] = True
            mismatches += not np.array_equal(region, oracle_region)
            mismatches += not np.array_equal(labels.y[k].astype(bool), oracle_cells)
            union = int(np.sum(region | gt))
            if union:
                mismatches += evalkit.iou(region, gt) != int(np.sum(region & gt)) / union
    assert criterion(6, "region, rasterisation and IoU oracles", mismatches == 0, f"{mismatches} mismatches on 200 scenes")


def test_criterion_07_auc_oracle(criterion):
    rng = np.random.default_rng(7)
    mismatches = 0
    for _ in range(100):
        n = int(rng.integers(2, 40))
        scores = np.round(rng.random(n), int(rng.integers(1, 4)))
        labels = np.r_[0, 1, rng.integers(0, 2, size=n - 2)]
        pos = [s for s, y in zip(scores, labels) if y]
        neg = [s for s, y in zip(scores, labels) if not y]
        pairs = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a, b in itertools.product(pos, neg))
        mismatches += evalkit.auc(scores, labels) != pairs / (len(pos) * len(neg))
    assert criterion(7, "AUC vs pairwise count", mismatches == 0, f"{mismatches} of 100 sets differ")


def test_criterion_08_optimizer_oracle(criterion):
    k, m, wd, lr = 2.0, 0.9, 1e-4, 0.05
    config = trainer.TrainConfig(momentum=m, weight_decay=wd)
    state = trainer.TrainState({"w": Tensor(np.array([1.5]))}, {"w": np.zeros(1)})
    theta, v, worst = 1.5, 0.0, 0.0
    for _ in range(50):
        trainer.nesterov_step(state, {"w": k * state.params["w"].data}, lr, config)
        g = k * theta + wd * theta
        v = m * v + g
        theta -= lr * (g + m * v)
        worst = max(worst, abs(state.params["w"].data[0] - theta))
    lrs = [trainer.lr_at(e, trainer.TrainConfig()) for e in (0, 4, 8)]
    lr_ok = all(math.isclose(a, b, rel_tol=1e-12) for a, b in zip(lrs, (1e-3, 1e-4, 1e-5)))
    assert criterion(8, "optimizer oracle", worst <= 1e-12 and lr_ok,
                     f"max trajectory diff {worst:.1e} over 50 steps, lr at 0/4/8 = {lrs}")


ARMS = ("baseline", "intra", "inter", "both")


@pytest.mark.slow
def test_criterion_09_directional_ablation(criterion):
    start = time.time()
    scores = {arm: [] for arm in ARMS}
    for seed in range(5):
        for arm in ARMS:
            config, _ = cli.load_config(None, {"seed": seed, "ablation": arm})
            state, _ = trainer.train(cli.train_samples(config), config.train_config())
            report = evalkit.evaluate(state.params, cli.eval_samples(config), thresholds=[0.3])
            scores[arm].append(report.mean_accuracy[0.3])
            print(f"seed {seed} {arm:>8}: mean accuracy @0.3 = {scores[arm][-1]:.3f}", flush=True)
    med = {arm: float(np.median(v)) for arm, v in scores.items()}
    minutes = (time.time() - start) / 60
    ok = (med["both"] >= med["baseline"] + 0.05 and med["intra"] >= med["baseline"]
          and med["inter"] >= med["baseline"] and minutes < 30)
    detail = ", ".join(f"{arm} {med[arm]:.3f}" for arm in ARMS) + f" (median of 5 seeds), {minutes:.1f} min"
    assert criterion(9, "directional ablation @T=0.3", ok, detail)


def test_criterion_10_determinism(criterion, tmp_path):
    cfg = write_config(tmp_path / "c.json", {**TOY, "ablation": "both"})
    runs = []
    for name in ("a", "b"):
        config, raw = cli.load_config(str(cfg))
        cli.cmd_train(config, str(tmp_path / name), raw)
        runs.append(tmp_path / name)
    files = sorted(p.relative_to(runs[0]) for p in runs[0].rglob("*") if p.is_file())
    differing = [str(f) for f in files if (runs[0] / f).read_bytes() != (runs[1] / f).read_bytes()]
    ok = not differing and len(files) == 9 + 3
    assert criterion(10, "determinism", ok, f"{len(files)} files compared, {len(differing)} differ")
