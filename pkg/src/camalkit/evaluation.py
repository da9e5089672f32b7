"""Alignment (IoU), faithfulness (removal/insertion), mask-perturbation study, accuracy."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import ndimage

from .attention import attention_maps
from .backend import ScalarTargetSelector
from .datasets import check_mask, normalize_images
from .errors import ConfigError, DataError, DomainError, ShapeError
from .regularizers import alpha_beta, camal_term, suppress_only_term
from .stats import UNDEFINED, correlations, mean_aggregate, stratified_bootstrap

DEFAULT_TAU = 0.7
DEFAULT_K_GRID = tuple(range(0, 101, 5))
PERTURBATION_KINDS = ("shift", "erode", "dilate")
DEFAULT_SEVERITIES = {"shift": (1, 2, 4, 8, 16), "erode": (1, 2, 3, 4), "dilate": (1, 2, 3, 4)}
REGULARIZERS = {
    "camal": lambda h, m: float(camal_term(alpha_beta(h, m))),
    "suppress_only": lambda h, m: float(suppress_only_term(h, m)),
}


@dataclass(frozen=True)
class AlignmentRecord:
    sample_id: str
    iou: float
    tau: float


@dataclass
class FaithfulnessCurve:
    mode: str
    k_grid: np.ndarray
    confidence: np.ndarray
    auc: float
    sample_id: str = ""
    label: int = -1


@dataclass
class PerturbedMasks:
    kind: str
    severities: list
    maps: list
    truncated: list = field(default_factory=list)  # requested severities dropped because the map degenerated


@dataclass
class PerturbationSeries:
    mask_id: str
    kind: str
    regularizer: str
    severities: list
    responses: list
    spearman: float | str
    pearson: float | str
    truncated: list = field(default_factory=list)


def _numpy(x):
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)


def _batched(seq, size):
    for i in range(0, len(seq), size):
        yield seq[i : i + size]


# ---------------------------------------------------------------------------
# alignment


def binarize_attention(attention, tau=DEFAULT_TAU):
    """1 where attention > tau (strict), else 0."""
    if not 0 < tau < 1:
        raise ConfigError(f"tau must lie in (0, 1), got {tau}")
    return (_numpy(attention) > tau).astype(np.uint8)


def iou(mask_a, mask_b):
    """|A & B| / |A | B|; two empty masks score 0."""
    a, b = _numpy(mask_a).astype(bool), _numpy(mask_b).astype(bool)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def _predict(model, images, batch_size=64):
    model.eval()
    with torch.no_grad():
        return torch.cat([model(x) for x in _batched(images, batch_size)])


def split_tensors(dataset, ids, split="test"):
    images, masks, labels = dataset.arrays(list(ids), split=split)
    return torch.from_numpy(normalize_images(images)), masks, torch.from_numpy(labels)


def dataset_attention(model, dataset, ids, layer_id=None, split="test", batch_size=64):
    """Normalized, image-resolution ground-truth-class attention for ``ids``.

    Returns ``(maps, masks, labels, logits)`` as numpy arrays.
    """
    x, masks, labels = split_tensors(dataset, ids, split)
    maps, logits = [], []
    model.eval()
    for sl in _batched(range(len(labels)), batch_size):
        sl = slice(sl.start, sl.stop)
        h, out = attention_maps(model, x[sl], ScalarTargetSelector.ground_truth(labels[sl]), layer_id)
        maps.append(h.values.detach().numpy())
        logits.append(out.numpy())
    return np.concatenate(maps), masks, labels.numpy(), np.concatenate(logits)


def alignment_eval(model, dataset, ids, tau=DEFAULT_TAU, layer_id=None, split="test"):
    """Per-sample IoU between binarized attention and the ground-truth mask."""
    ids = list(ids)
    maps, masks, _, _ = dataset_attention(model, dataset, ids, layer_id, split)
    records = [AlignmentRecord(i, iou(binarize_attention(h, tau), m), tau) for i, h, m in zip(ids, maps, masks)]
    values = np.array([r.iou for r in records])
    summary = {"n": len(records), "tau": tau, "mean_iou": float(values.mean()), "std_iou": float(values.std())}
    return records, summary


def accuracy_eval(model, dataset, ids, split="test"):
    x, _, labels = split_tensors(dataset, ids, split)
    return float((_predict(model, x).argmax(1) == labels).double().mean())


# ---------------------------------------------------------------------------
# faithfulness


def check_k_grid(k_grid):
    k = np.asarray(k_grid, dtype=np.float64)
    if k.ndim != 1 or len(k) < 2 or k[0] != 0 or k[-1] != 100 or np.any(np.diff(k) <= 0):
        raise ConfigError(f"k_grid must increase strictly from 0 to 100, got {list(k_grid)}")
    return k


def pixel_ranking(attention):
    """Flat pixel indices by descending attention; ties keep row-major order."""
    flat = _numpy(attention).reshape(-1)
    return np.argsort(-flat, kind="stable")


def perturbed_images(image, attention, mode, k_grid=DEFAULT_K_GRID):
    """Stack of images for each k: top-k% pixels zeroed (removal) or restored onto zeros (insertion)."""
    if mode not in ("removal", "insertion"):
        raise ConfigError(f"mode must be 'removal' or 'insertion', got {mode!r}")
    k = check_k_grid(k_grid)
    image = torch.as_tensor(image)
    c, h, w = image.shape
    if tuple(_numpy(attention).shape) != (h, w):
        raise ShapeError(f"attention shape {_numpy(attention).shape} does not match image {h}x{w}")
    order = torch.from_numpy(pixel_ranking(attention))
    counts = np.rint(k / 100 * h * w).astype(int)
    out = []
    for n in counts:
        chosen = torch.zeros(h * w, dtype=torch.bool)
        chosen[order[:n]] = True
        chosen = chosen.reshape(h, w)
        if mode == "removal":
            out.append(torch.where(chosen, torch.zeros_like(image), image))
        else:
            out.append(torch.where(chosen, image, torch.zeros_like(image)))
    return torch.stack(out)


def _auc(k, conf):
    return float(np.trapezoid(conf, k / 100.0))


def faithfulness_eval(model, image, label, attention, mode, k_grid=DEFAULT_K_GRID, sample_id=""):
    """Ground-truth-class softmax confidence along the removal or insertion path."""
    k = check_k_grid(k_grid)
    stack = perturbed_images(image, attention, mode, k)
    probs = torch.softmax(_predict(model, stack), dim=1)[:, int(label)].double().numpy()
    return FaithfulnessCurve(mode, k, probs, _auc(k, probs), sample_id, int(label))


def faithfulness_identities(model, image, label, attention, k_grid=DEFAULT_K_GRID):
    """Endpoint deviations from direct evaluation and the removal/insertion complement check.

    Returns ``(max_endpoint_deviation, complement_holds)``.
    """
    image = torch.as_tensor(image)
    direct = torch.softmax(_predict(model, torch.stack([image, torch.zeros_like(image)])), 1)[:, int(label)]
    p_full, p_zero = float(direct[0]), float(direct[1])
    rem = faithfulness_eval(model, image, label, attention, "removal", k_grid).confidence
    ins = faithfulness_eval(model, image, label, attention, "insertion", k_grid).confidence
    dev = max(abs(rem[0] - p_full), abs(rem[-1] - p_zero), abs(ins[0] - p_zero), abs(ins[-1] - p_full))
    r = perturbed_images(image, attention, "removal", k_grid)
    i = perturbed_images(image, attention, "insertion", k_grid)
    complement = bool(torch.equal(r + i, image.expand_as(r)))
    return float(dev), complement


def faithfulness_for_ids(model, dataset, ids, k_grid=DEFAULT_K_GRID, layer_id=None, split="test"):
    """Both curves for every sample in ``ids``; returns ``{mode: [curves]}``."""
    ids = list(ids)
    x, _, labels = split_tensors(dataset, ids, split)
    maps, _, _, _ = dataset_attention(model, dataset, ids, layer_id, split)
    curves = {"removal": [], "insertion": []}
    for sid, img, lab, h in zip(ids, x, labels, maps):
        for mode in curves:
            curves[mode].append(faithfulness_eval(model, img, int(lab), h, mode, k_grid, sid))
    return curves


def curve_band(curves, ci_level=0.95, n_resamples=10_000, seed=0):
    """Mean curve and a bootstrap band over samples, plus mean AUC with its interval."""
    conf = np.stack([c.confidence for c in curves])
    if conf.shape[0] < 2:
        raise DataError("a confidence band needs at least two curves")
    lo, hi = np.empty(conf.shape[1]), np.empty(conf.shape[1])
    for j in range(conf.shape[1]):
        _, lo[j], hi[j] = stratified_bootstrap(conf[None, :, j], mean_aggregate, n_resamples, ci_level, seed)
    aucs = np.array([c.auc for c in curves])
    auc_point, auc_lo, auc_hi = stratified_bootstrap(aucs[None], mean_aggregate, n_resamples, ci_level, seed)
    return {"k": curves[0].k_grid, "mean": conf.mean(0), "low": lo, "high": hi,
            "auc": auc_point, "auc_low": auc_lo, "auc_high": auc_hi}


def representative_ids(dataset, ids, per_class=1, seed=0):
    """``per_class`` seeded picks from each class present in the dataset."""
    ids = sorted(ids)
    labels = {i: dataset[i].label for i in ids}
    rng = np.random.default_rng(seed)
    chosen = []
    for c in range(dataset.n_classes):
        pool = [i for i in ids if labels[i] == c]
        if len(pool) < per_class:
            raise DataError(f"class {c} has {len(pool)} test samples; {per_class} requested")
        chosen.extend(sorted(rng.choice(pool, size=per_class, replace=False).tolist()))
    return chosen


def representative_faithfulness_suite(model, dataset, ids, per_class=1, seed=0, k_grid=DEFAULT_K_GRID,
                                      layer_id=None, n_resamples=10_000):
    """One (or ``per_class``) sample per class, both modes, mean curves with 95% bands."""
    chosen = representative_ids(dataset, ids, per_class, seed)
    curves = faithfulness_for_ids(model, dataset, chosen, k_grid, layer_id)
    bands = {mode: curve_band(cs, n_resamples=n_resamples, seed=seed) for mode, cs in curves.items()}
    return chosen, curves, bands


# ---------------------------------------------------------------------------
# mask perturbation study


def _shift(mask, s):
    # move toward the image centre on both axes so the shape stays in frame as long as possible
    h, w = mask.shape
    ys, xs = np.nonzero(mask)
    dy = s if ys.mean() <= (h - 1) / 2 else -s
    dx = s if xs.mean() <= (w - 1) / 2 else -s
    out = np.zeros_like(mask)
    src_y = slice(max(0, -dy), h - max(0, dy))
    dst_y = slice(max(0, dy), h - max(0, -dy))
    src_x = slice(max(0, -dx), w - max(0, dx))
    dst_x = slice(max(0, dx), w - max(0, -dx))
    out[dst_y, dst_x] = mask[src_y, src_x]
    return out


def _element(r):
    return np.ones((2 * r + 1, 2 * r + 1), dtype=bool)


def perturb_mask(mask, kind, severity):
    m = np.asarray(mask).astype(bool)
    if severity == 0:
        return m.astype(np.uint8)
    if kind == "shift":
        return _shift(m, severity).astype(np.uint8)
    if kind == "erode":
        return ndimage.binary_erosion(m, _element(severity), border_value=0).astype(np.uint8)
    if kind == "dilate":
        return ndimage.binary_dilation(m, _element(severity)).astype(np.uint8)
    raise ConfigError(f"unknown perturbation {kind!r}; choose from {PERTURBATION_KINDS}")


def perturb_masks(mask, kind, severities):
    """Severity 0 (the mask itself) followed by each severity until the map degenerates."""
    sev = [int(s) for s in severities]
    if any(s <= 0 for s in sev) or any(b <= a for a, b in zip(sev, sev[1:])):
        raise ConfigError(f"severities must be increasing positive integers, got {sev}")
    mask = np.asarray(mask).astype(np.uint8)
    check_mask(mask)
    if kind not in PERTURBATION_KINDS:
        raise ConfigError(f"unknown perturbation {kind!r}; choose from {PERTURBATION_KINDS}")
    out = PerturbedMasks(kind, [0], [mask.astype(np.uint8)])
    for i, s in enumerate(sev):
        h = perturb_mask(mask, kind, s)
        if h.sum() == 0 or h.all():
            out.truncated = sev[i:]
            break
        out.severities.append(s)
        out.maps.append(h)
    return out


def regularizer_response_study(masks, kinds=PERTURBATION_KINDS, severities=None, regularizers=REGULARIZERS):
    """Regularizer response vs severity for every (mask, kind, regularizer).

    ``masks`` maps an id to an H x W binary mask. Returns the series list and
    a summary ``{kind: {regularizer: {...}}}`` with mean/std of each
    correlation over the masks where it is defined.
    """
    severities = {**DEFAULT_SEVERITIES, **(severities or {})}
    series = []
    for mask_id, mask in masks.items():
        m = np.asarray(mask, dtype=np.float64)
        for kind in kinds:
            pm = perturb_masks(mask, kind, severities[kind])
            if len(pm.severities) < 2:
                raise DomainError(f"mask {mask_id}: fewer than two severities survive {kind}")
            for name, fn in regularizers.items():
                resp = [fn(np.asarray(h, dtype=np.float64), m) for h in pm.maps]
                corr = correlations(pm.severities, resp)
                series.append(PerturbationSeries(mask_id, kind, name, list(pm.severities), resp,
                                                 corr.spearman, corr.pearson, list(pm.truncated)))
    return series, summarize_study(series)


def summarize_study(series):
    summary = {}
    for s in series:
        summary.setdefault(s.kind, {}).setdefault(s.regularizer, {"spearman": [], "pearson": [], "truncated": 0})
        entry = summary[s.kind][s.regularizer]
        entry["spearman"].append(s.spearman)
        entry["pearson"].append(s.pearson)
        entry["truncated"] += bool(s.truncated)
    for kind in summary.values():
        for entry in kind.values():
            for stat in ("spearman", "pearson"):
                vals = [v for v in entry[stat] if v != UNDEFINED]
                n_total = len(entry[stat])
                if not vals:
                    entry[stat] = {"mean": UNDEFINED, "std": UNDEFINED, "defined": 0, "n": n_total}
                else:
                    entry[stat] = {"mean": float(np.mean(vals)), "std": float(np.std(vals)),
                                   "defined": len(vals), "n": n_total}
    return summary
