"""Acceptance criteria 1-8, one PASS/FAIL line each (printed in the terminal summary).

Criteria 4-6 share one seeded 10-fold run of the tiny CNN (Vanilla and CAMAL,
default training configuration). Set ``CAMALKIT_ACCEPTANCE_DIR`` to keep its
artifacts; completed folds are then reused on the next run.
"""
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from camalkit.cli import main
from camalkit.datasets import load_directory
from camalkit.repro import (
    check_accuracy, check_alignment, check_cam_equivalence, check_extraction_scaling, check_faithfulness,
    check_loss_collapse, check_perturbation, check_statistics,
)

pytestmark = pytest.mark.acceptance

RESULTS = {}


def record(number, title, ok, observed, seconds, budget=None):
    within = budget is None or seconds <= budget
    RESULTS[number] = {"title": title, "passed": bool(ok and within), "observed": observed,
                       "seconds": seconds, "budget": budget}
    return ok and within


def run(argv):
    assert main(argv) == 0, f"camalkit {' '.join(argv)} failed"


@pytest.fixture(scope="module")
def out(tmp_path_factory):
    keep = os.environ.get("CAMALKIT_ACCEPTANCE_DIR")
    path = Path(keep) if keep else tmp_path_factory.mktemp("acceptance")
    path.mkdir(parents=True, exist_ok=True)
    return path


@pytest.fixture(scope="module")
def data(out):
    if not (out / "data" / "manifest.json").exists():
        run(["generate-data", "--out", str(out / "data")])
    return out / "data"


@pytest.fixture(scope="module")
def benchmark(out, data):
    """10-fold tiny-CNN runs, evaluated on every test sample, plus the paired test on IoU."""
    t0 = time.perf_counter()
    for method in ("vanilla", "camal"):
        cfg = out / "configs" / f"{method}.yaml"
        cfg.parent.mkdir(exist_ok=True)
        cfg.write_text(f"data: {{root: {data}}}\ntrain: {{method: {method}, model: tiny_cnn, seed: 0}}\n")
        run(["train", "--config", str(cfg), "--out", str(out / "runs" / "tiny_cnn")])
        run(["evaluate", str(out / "runs" / "tiny_cnn" / "synthetic" / method), "--which", "all", "--all-samples"])
    ev = out / "runs" / "tiny_cnn" / "synthetic"
    run(["stats", "--test", "wsrt", str(ev / "camal/eval/align_folds.csv"), str(ev / "vanilla/eval/align_folds.csv"),
         "--out", str(out / "stats" / "tiny_cnn" / "wsrt")])
    return out, time.perf_counter() - t0


def test_c1_batch_equals_per_sample():
    t0 = time.perf_counter()
    ok, obs = check_cam_equivalence()
    assert record(1, "batch-level CAMs equal per-sample CAMs", ok, obs, time.perf_counter() - t0, 120)


def test_c2_extraction_scaling(out):
    t0 = time.perf_counter()
    run(["bench-overhead", "--out", str(out / "bench"), "--models", "tiny_cnn", "--batch-sizes", "1,4,8,16,32"])
    ok, obs = check_extraction_scaling(out)
    assert record(2, "per-sample extraction grows linearly, batch-level stays flat", ok, obs,
                  time.perf_counter() - t0, 300)


def test_c3_perturbation_study(out):
    t0 = time.perf_counter()
    run(["perturb-study", "--out", str(out / "perturb"), "--n-masks", "60"])
    ok, obs = check_perturbation(out)
    assert record(3, "regularizer response to shift/erode/dilate", ok, obs, time.perf_counter() - t0, 120)


def test_c4_alignment(benchmark):
    out, seconds = benchmark
    ok, obs = check_alignment(out)
    assert record(4, "CAMAL IoU beats Vanilla by >= 0.15, WSRT p < 0.05", ok, obs, seconds, 4 * 3600)


def test_c5_generalization(benchmark):
    out, seconds = benchmark
    ok, obs = check_accuracy(out)
    assert record(5, "CAMAL accuracy >= Vanilla, no fold trails by > 5 points", ok, obs, seconds)


def test_c6_faithfulness(benchmark):
    out, seconds = benchmark
    ok, obs = check_faithfulness(out)
    assert record(6, "faithfulness identities and CAMAL removal/insertion direction", ok, obs, seconds)


def test_c7_statistics_oracles():
    t0 = time.perf_counter()
    ok, obs = check_statistics()
    assert record(7, "WSRT/POI/bootstrap oracles", ok, obs, time.perf_counter() - t0, 60)


def test_c8_loss_collapse(data):
    t0 = time.perf_counter()
    ok, obs = check_loss_collapse(load_directory(data))
    assert record(8, "lambda=0 reproduces Vanilla bitwise; one extra backward per batch", ok, obs,
                  time.perf_counter() - t0)


def summary_lines():
    lines = []
    for n in range(1, 9):
        r = RESULTS.get(n)
        if r is None:
            lines.append(f"NOT RUN criterion {n}")
            continue
        budget = f" / {r['budget']}s" if r["budget"] else ""
        lines.append(f"{'PASS' if r['passed'] else 'FAIL'} criterion {n}: {r['title']} "
                     f"({r['seconds']:.0f}s{budget}) {json.dumps(r['observed'], default=_plain)}")
    return lines


def _plain(x):
    return x.item() if isinstance(x, np.generic) else str(x)
