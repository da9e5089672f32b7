"""Figures rendered from persisted CSV files (PNG and SVG)."""
from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# fixed id salt so re-rendering a CSV reproduces the SVG byte for byte
matplotlib.rcParams["svg.hashsalt"] = "camalkit"


def _save(fig, stem):
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    paths = [stem.with_suffix(".png"), stem.with_suffix(".svg")]
    fig.savefig(paths[0], dpi=120, metadata={"Software": None})
    fig.savefig(paths[1], metadata={"Date": None, "Creator": None})
    plt.close(fig)
    return paths


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def plot_faithfulness_bands(bands_csv, out_dir, label=None):
    """One figure per mode: mean confidence against k with the shaded 95% band."""
    by_mode = defaultdict(list)
    for r in _rows(bands_csv):
        by_mode[r["mode"]].append(r)
    written = []
    for mode, rows in sorted(by_mode.items()):
        k = [float(r["k"]) for r in rows]
        fig, ax = plt.subplots(figsize=(4.2, 3.2))
        ax.plot(k, [float(r["mean"]) for r in rows], label=label or mode)
        ax.fill_between(k, [float(r["low"]) for r in rows], [float(r["high"]) for r in rows], alpha=0.25)
        ax.set_xlabel(f"pixels {'removed' if mode == 'removal' else 'inserted'} (%)")
        ax.set_ylabel("ground-truth class confidence")
        ax.set_ylim(0, 1)
        ax.set_title(mode)
        fig.tight_layout()
        written += _save(fig, Path(out_dir) / f"faith_{mode}")
    return written


def plot_overhead(overhead_csv, out_dir):
    """Training-step time against batch size, one line per step mode, one panel per model."""
    by_model = defaultdict(list)
    for r in _rows(overhead_csv):
        by_model[r["model"]].append(r)
    fig, axes = plt.subplots(1, len(by_model), figsize=(4.2 * len(by_model), 3.2), squeeze=False)
    for ax, (model, rows) in zip(axes[0], sorted(by_model.items())):
        b = [int(r["batch_size"]) for r in rows]
        for mode in ("vanilla", "camal-batch", "camal-per-sample"):
            ax.plot(b, [1e3 * float(r[f"{mode}_seconds"]) for r in rows], marker="o", label=mode)
        ax.set_xlabel("batch size")
        ax.set_ylabel("step time (ms)")
        ax.set_title(model)
        ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, Path(out_dir) / "overhead")


def plot_extraction(extraction_csv, out_dir):
    by_model = defaultdict(list)
    for r in _rows(extraction_csv):
        by_model[r["model"]].append(r)
    fig, axes = plt.subplots(1, len(by_model), figsize=(4.2 * len(by_model), 3.2), squeeze=False)
    for ax, (model, rows) in zip(axes[0], sorted(by_model.items())):
        b = [int(r["batch_size"]) for r in rows]
        ax.plot(b, [1e3 * float(r["batch_seconds"]) for r in rows], marker="o", label="batch-level")
        ax.plot(b, [1e3 * float(r["per_sample_seconds"]) for r in rows], marker="o", label="per-sample")
        ax.set_xlabel("batch size")
        ax.set_ylabel("extraction time (ms)")
        ax.set_title(model)
        ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, Path(out_dir) / "extraction")


def plot_perturbation_overlay(mask, maps, severities, kind, stem):
    """Reference mask (grey) with each simulated attention map outlined."""
    fig, axes = plt.subplots(1, len(maps), figsize=(1.6 * len(maps), 1.8), squeeze=False)
    for ax, h, s in zip(axes[0], maps, severities):
        ax.imshow(mask, cmap="gray", vmin=0, vmax=2)
        ax.contour(h, levels=[0.5], colors="red", linewidths=0.8)
        ax.set_title(f"{kind} {s}", fontsize=7)
        ax.axis("off")
    fig.tight_layout()
    return _save(fig, stem)


PLOTTERS = {"faith": plot_faithfulness_bands, "overhead": plot_overhead, "extraction": plot_extraction}
