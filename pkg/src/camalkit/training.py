"""Training loops for Vanilla, CAMAL and Prior supervision, plus the value-target probe."""
from __future__ import annotations

import csv
import json
import os
import shutil
import tempfile
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
import yaml

from .attention import extract_cams, normalize_minmax, upsample_to
from .backend import BackwardCounter, ScalarTargetSelector, build_model
from .datasets import normalize_images
from .errors import ConfigError, NumericError, PairingError, ValidationError
from .regularizers import alpha_beta, camal_term, total_loss

METHODS = ("vanilla", "camal", "prior")
MASK_SOURCES = ("ground-truth", "external-directory")
LOG_FIELDS = ("step", "epoch", "task_loss", "camal_term", "alpha_mean", "beta_mean", "total")


@dataclass
class TrainConfig:
    method: str = "camal"
    mask_source: str | None = None
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    lam: float = 1.0
    seed: int = 0
    model: str = "tiny_cnn"
    capture_layer: str | None = None
    # differentiate the regularizer through the Grad-CAM channel weights
    through_weights: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValidationError(f"unknown method {self.method!r}", ["train.method"])
        if self.mask_source is None:
            self.mask_source = "external-directory" if self.method == "prior" else "ground-truth"
        if self.mask_source not in MASK_SOURCES:
            raise ValidationError(f"unknown mask source {self.mask_source!r}", ["train.mask_source"])
        if self.method == "prior" and self.mask_source != "external-directory":
            raise ValidationError("method 'prior' needs mask_source 'external-directory'", ["train.mask_source"])
        if self.lam < 0:
            raise ValidationError("lambda must be nonnegative", ["train.lambda"])
        if self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("epochs and batch_size must be positive", ["train.epochs", "train.batch_size"])

    @property
    def effective_lambda(self):
        return 0.0 if self.method == "vanilla" else self.lam

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValidationError(f"unknown training keys: {unknown}", unknown)
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d


@dataclass
class RunArtifacts:
    state_dict: dict
    log: list
    fold: int | None
    config: dict
    timings: dict
    counters: dict = field(default_factory=dict)

    def write(self, out_dir):
        """Write the run directory atomically (temp dir + rename)."""
        out_dir = Path(out_dir)
        out_dir.parent.mkdir(parents=True, exist_ok=True)
        tmp = Path(tempfile.mkdtemp(prefix=f".{out_dir.name}.", dir=out_dir.parent))
        try:
            (tmp / "config.snapshot").write_text(yaml.safe_dump(self.config, sort_keys=True))
            write_log(tmp / "log.csv", self.log)
            torch.save(self.state_dict, tmp / "weights.bin")
            timing = dict(self.timings, counters=self.counters, fold=self.fold)
            (tmp / "timing.json").write_text(json.dumps(timing, indent=2, sort_keys=True) + "\n")
            if out_dir.exists():
                shutil.rmtree(out_dir)
            os.replace(tmp, out_dir)
        except BaseException:
            shutil.rmtree(tmp, ignore_errors=True)
            raise
        return out_dir


def write_log(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: ("" if r.get(k) is None else r[k]) for k in LOG_FIELDS})


def _batches(n, batch_size, generator):
    perm = torch.randperm(n, generator=generator)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


def _dump_diagnostic(out_dir, info):
    if out_dir is None:
        return None
    path = Path(out_dir).with_name(Path(out_dir).name + ".diagnostic.json")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(info, indent=2, default=str))
    return path


def _train(config, dataset, train_ids, task, fold=None, masks_override=None, diagnostic_dir=None):
    n_out = dataset.n_classes if task == "classification" else 1
    model = build_model(config.model, n_classes=n_out, image_size=dataset.image_size[0], seed=config.seed)
    opt = torch.optim.AdamW(model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)
    images, masks, labels = dataset.arrays(train_ids, split="train")
    if masks_override is not None:
        missing = [i for i in train_ids if i not in masks_override]
        if missing:
            raise PairingError(f"no reference mask for {len(missing)} training samples, e.g. {missing[0]}")
        masks = np.stack([masks_override[i] for i in train_ids]).astype(np.float32)
    x_all = torch.from_numpy(normalize_images(images))
    m_all = torch.from_numpy(masks)
    y_all = torch.from_numpy(labels)
    if task == "value":
        # regression target: label rescaled to [0, 1]
        v_all = y_all.float() / max(dataset.n_classes - 1, 1)

    supervise = config.method != "vanilla"
    lam = config.effective_lambda
    height, width = masks.shape[-2:]
    gen = torch.Generator().manual_seed(config.seed)
    counter = BackwardCounter()
    log, constant_cams, step = [], 0, 0
    t_start, t_attention = time.perf_counter(), 0.0
    model.train()
    for epoch in range(config.epochs):
        for idx in _batches(len(train_ids), config.batch_size, gen):
            x, y = x_all[idx], y_all[idx]
            row = {"step": step, "epoch": epoch}
            if supervise:
                t0 = time.perf_counter()
                selector = (ScalarTargetSelector.ground_truth(y) if task == "classification"
                            else ScalarTargetSelector.value_head())
                raw, outputs, _ = extract_cams(
                    model, x, selector, config.capture_layer,
                    retain_higher_order=config.through_weights, retain_graph=True, counter=counter,
                )
                maps = normalize_minmax(raw)
                constant_cams += int((raw.flatten(1).amax(1) == raw.flatten(1).amin(1)).sum())
                ab = alpha_beta(upsample_to(maps, height, width), m_all[idx])
                term = camal_term(ab)
                t_attention += time.perf_counter() - t0
                row.update(alpha_mean=float(ab.alpha.detach().mean()), beta_mean=float(ab.beta.detach().mean()))
            else:
                outputs, term = model(x), None
            if task == "classification":
                task_loss = F.cross_entropy(outputs, y)
            else:
                task_loss = F.mse_loss(outputs[:, 0], v_all[idx])
            if supervise:
                breakdown = total_loss(task_loss, term, lam)
                loss = breakdown.total
                row["camal_term"] = float(term.detach())
            else:
                loss = task_loss
            row.update(task_loss=float(task_loss.detach()), total=float(loss.detach()))
            if not torch.isfinite(loss):
                path = _dump_diagnostic(diagnostic_dir, {"fold": fold, "row": row, "config": config.to_dict()})
                raise NumericError(f"non-finite loss at step {step} (epoch {epoch}); diagnostic: {path}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            counter.tick("task")
            opt.step()
            log.append(row)
            step += 1
    model.eval()
    timings = {"total_seconds": time.perf_counter() - t_start, "attention_seconds": t_attention,
               "steps": step}
    counters = {"backward_passes": counter.count, "by_tag": dict(counter.by_tag),
                "constant_cam_samples": constant_cams}
    return model, RunArtifacts(
        {k: v.detach().clone() for k, v in model.state_dict().items()},
        log, fold, config.to_dict(), timings, counters,
    )


def train_classifier(config, dataset, train_ids, fold=None, pseudo_masks=None, diagnostic_dir=None):
    """Train one classifier on ``train_ids``; returns ``(model, RunArtifacts)``.

    Prior differs from CAMAL only in where the reference masks come from.
    """
    if config.mask_source == "external-directory":
        if pseudo_masks is None:
            raise PairingError("mask source 'external-directory' but no pseudo-masks were supplied")
        override = pseudo_masks
    else:
        override = None
    return _train(config, dataset, list(train_ids), "classification", fold, override, diagnostic_dir)


def train_scalar_target_probe(config, dataset, train_ids, fold=None, diagnostic_dir=None):
    """Same pipeline with a scalar regression head as the attention target."""
    if config.method == "prior":
        raise ConfigError("the scalar-target probe supports vanilla and camal only")
    return _train(config, dataset, list(train_ids), "value", fold, None, diagnostic_dir)


def load_model(run_dir, dataset_n_classes=None, image_size=64, task="classification"):
    """Rebuild a trained model from ``weights.bin`` and ``config.snapshot``."""
    run_dir = Path(run_dir)
    weights = run_dir / "weights.bin"
    if not weights.exists():
        raise FileNotFoundError(f"{weights} does not exist")
    cfg = TrainConfig.from_dict(yaml.safe_load((run_dir / "config.snapshot").read_text()))
    state = torch.load(weights, weights_only=True)
    n_out = state["head.weight"].shape[0]
    model = build_model(cfg.model, n_classes=n_out, image_size=image_size)
    model.load_state_dict(state)
    model.eval()
    return model, cfg
