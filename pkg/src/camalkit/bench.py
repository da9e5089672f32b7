"""Wall-clock measurements of attention extraction and full training steps."""
from __future__ import annotations

import time

import numpy as np
import torch
import torch.nn.functional as F

from .attention import gradcam_batch, gradcam_per_sample_oracle, extract_cams, normalize_minmax, upsample_to
from .backend import ScalarTargetSelector, build_model, forward_with_capture, select_scalar
from .regularizers import alpha_beta, camal_term

EXTRACTION_MODES = ("batch", "per-sample")
STEP_MODES = ("vanilla", "camal-batch", "camal-per-sample")


def _inputs(batch_size, image_size, n_classes, seed):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(batch_size, 3, image_size, image_size, generator=g)
    y = torch.randint(0, n_classes, (batch_size,), generator=g)
    masks = torch.zeros(batch_size, image_size, image_size)
    q = image_size // 4
    masks[:, q : 3 * q, q : 3 * q] = 1
    return x, y, masks


def _best_time(fn, repeats):
    # minimum over repeats: scheduler noise only ever adds time
    fn()  # warm-up
    return min(fn() for _ in range(repeats))


def extraction_once(model, images, labels, mode, layer_id=None):
    """Time of the gradient traversals that produce the CAMs, for one call.

    The forward pass is shared and left out: both paths need exactly one,
    and only the backward part differs (one traversal vs one per sample).
    """
    if mode not in EXTRACTION_MODES:
        raise ValueError(f"mode must be one of {EXTRACTION_MODES}")
    sel = ScalarTargetSelector.ground_truth(labels)
    n = images.shape[0]
    outputs, feats = forward_with_capture(model, images, layer_id)
    scalars = select_scalar(outputs, sel)
    t0 = time.perf_counter()
    if mode == "batch":
        (g,) = torch.autograd.grad(scalars.sum(), feats.values)
        gradcam_batch(feats.values.detach(), g)
    else:
        for b in range(n):
            (g,) = torch.autograd.grad(scalars[b], feats.values, retain_graph=b < n - 1)
            gradcam_batch(feats.values[b : b + 1].detach(), g[b : b + 1])
    return time.perf_counter() - t0


def step_seconds(model, images, labels, masks, mode, repeats=5, lam=1.0):
    """Best-of-``repeats`` time of one full optimizer step (forward, losses, backward, update)."""
    opt = torch.optim.SGD(model.parameters(), lr=0.0)  # lr 0 keeps the model fixed across repeats
    sel = ScalarTargetSelector.ground_truth(labels)
    h, w = masks.shape[-2:]

    def run():
        t0 = time.perf_counter()
        if mode == "vanilla":
            loss = F.cross_entropy(model(images), labels)
        else:
            if mode == "camal-batch":
                raw, outputs, _ = extract_cams(model, images, sel, retain_higher_order=True, retain_graph=True)
            else:
                raw, outputs = gradcam_per_sample_oracle(model, images, sel, retain_higher_order=True,
                                                         return_outputs=True)
            term = camal_term(alpha_beta(upsample_to(normalize_minmax(raw), h, w), masks))
            loss = F.cross_entropy(outputs, labels) + lam * term
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        return time.perf_counter() - t0

    if mode not in STEP_MODES:
        raise ValueError(f"mode must be one of {STEP_MODES}")
    return _best_time(run, repeats)


def fit_line(xs, ys):
    """Least-squares slope, intercept and R^2."""
    xs, ys = np.asarray(xs, dtype=float), np.asarray(ys, dtype=float)
    slope, intercept = np.polyfit(xs, ys, 1)
    resid = ys - (slope * xs + intercept)
    ss_tot = ((ys - ys.mean()) ** 2).sum()
    r2 = 1.0 - (resid**2).sum() / ss_tot if ss_tot > 0 else 0.0
    return float(slope), float(intercept), float(r2)


def extraction_scaling(model_name="tiny_cnn", batch_sizes=(4, 8, 16, 32), image_size=64, n_classes=3,
                       repeats=21, seed=0):
    """Extraction time per batch size for both paths, with the line fit of the per-sample path.

    Repeats are interleaved across batch sizes so a slow stretch of the
    machine hits every size alike; each size keeps its best time.
    """
    model = build_model(model_name, n_classes=n_classes, image_size=image_size, seed=seed)
    inputs = {b: _inputs(b, image_size, n_classes, seed)[:2] for b in batch_sizes}
    best = {(b, m): float("inf") for b in batch_sizes for m in EXTRACTION_MODES}
    for b in batch_sizes:  # warm-up
        for m in EXTRACTION_MODES:
            extraction_once(model, *inputs[b], m)
    for _ in range(repeats):
        for b in batch_sizes:
            for m in EXTRACTION_MODES:
                best[b, m] = min(best[b, m], extraction_once(model, *inputs[b], m))
    rows = [{"model": model_name, "batch_size": b, "batch_seconds": best[b, "batch"],
             "per_sample_seconds": best[b, "per-sample"]} for b in batch_sizes]
    for r in rows:
        r["ratio"] = r["per_sample_seconds"] / r["batch_seconds"]
    slope, intercept, r2 = fit_line([r["batch_size"] for r in rows], [r["per_sample_seconds"] for r in rows])
    fit = {"slope": slope, "intercept": intercept, "r2": r2,
           "batch_growth": rows[-1]["batch_seconds"] / rows[0]["batch_seconds"]}
    return rows, fit


def step_overhead(model_name="tiny_cnn", batch_sizes=(1, 4, 8, 16, 32), image_size=64, n_classes=3,
                  repeats=5, seed=0):
    """Training-step times for vanilla, batch-level CAMAL and per-sample CAMAL."""
    model = build_model(model_name, n_classes=n_classes, image_size=image_size, seed=seed)
    rows = []
    for b in batch_sizes:
        x, y, m = _inputs(b, image_size, n_classes, seed)
        row = {"model": model_name, "batch_size": b}
        for mode in STEP_MODES:
            row[f"{mode}_seconds"] = step_seconds(model, x, y, m, mode, repeats)
        row["camal_overhead"] = row["camal-batch_seconds"] / row["vanilla_seconds"]
        row["per_sample_over_batch"] = row["camal-per-sample_seconds"] / row["camal-batch_seconds"]
        rows.append(row)
    return rows

