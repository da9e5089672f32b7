"""``camalkit`` command line.

Exit codes: 0 success, 1 acceptance failure (repro), 2 validation error,
3 data error, 4 numeric abort.
"""
from __future__ import annotations

import argparse
import csv
import json
import shutil
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields
from multiprocessing import get_context
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .config import config_hash, load_config, train_config
from .datasets import (
    FoldPlan, SyntheticSpec, box_pseudo_masks, export_directory, export_masks, generate_synthetic,
    load_directory, load_pseudo_masks, make_folds,
)
from .errors import CamalError, DataError, OutputExistsError, PairingError, ValidationError

DATASET_ENTRIES = ("images", "masks", "images_test", "pseudo_masks", "labels.csv", "meta.json", "manifest.json")
EVAL_KINDS = ("align", "faith", "accuracy")


# ---------------------------------------------------------------------------
# helpers


def _now():
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def write_manifest(out_dir, command, seed=None, cfg=None, config_path=None, extra=None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "manifest.json"
    previous = json.loads(path.read_text()) if path.exists() else {}
    manifest = {
        "command": command,
        "config_path": str(config_path) if config_path else None,
        "config_hash": config_hash(cfg) if cfg is not None else None,
        "seed": seed,
        "output_dir": str(out_dir),
        "started": previous.get("started", _now()),
        "updated": _now(),
        "version": __version__,
        **(extra or {}),
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")
    return path


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    return str(x)


def parse_folds(text, k):
    """``"0-2,5"`` -> [0, 1, 2, 5]; ``None`` -> every fold."""
    if text is None:
        return list(range(k))
    out = set()
    for part in text.split(","):
        try:
            if "-" in part:
                a, b = part.split("-")
                out.update(range(int(a), int(b) + 1))
            else:
                out.add(int(part))
        except ValueError:
            raise ValidationError(f"cannot parse fold selection {text!r}", ["--folds"]) from None
    bad = sorted(f for f in out if not 0 <= f < k)
    if bad:
        raise ValidationError(f"folds {bad} outside 0..{k - 1}", ["--folds"])
    return sorted(out)


def _fold_dirs(run_dir):
    return sorted((p for p in Path(run_dir).iterdir() if p.is_dir() and p.name.isdigit()), key=lambda p: int(p.name))


def _load_dataset(cfg):
    root = cfg["data"]["root"]
    if not root:
        raise ValidationError("data.root is not set", ["data.root"])
    if not Path(root).is_dir():
        raise DataError(f"dataset directory {root} does not exist")
    return load_directory(root, cfg["data"]["resize"], cfg["data"]["crop"])


def _pool(jobs):
    return ProcessPoolExecutor(max_workers=jobs, mp_context=get_context("spawn"))


# ---------------------------------------------------------------------------
# generate-data


def _synthetic_spec(path, seed):
    d = {}
    if path:
        d = yaml.safe_load(Path(path).read_text()) or {}
        known = {f.name for f in fields(SyntheticSpec)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValidationError(f"unknown synthetic spec keys: {unknown}", unknown)
        if "image_size" in d:
            d["image_size"] = tuple(d["image_size"])
    if seed is not None:
        d["seed"] = seed
    try:
        return SyntheticSpec(**d)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"invalid synthetic spec: {exc}", sorted(d)) from exc


def cmd_generate_data(args):
    out = Path(args.out)
    spec = _synthetic_spec(args.spec, args.seed)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise OutputExistsError(f"{out} is not empty; pass --force to overwrite")
        for name in DATASET_ENTRIES:
            target = out / name
            if target.is_dir():
                shutil.rmtree(target)
            elif target.exists():
                target.unlink()
    dataset = generate_synthetic(spec)
    export_directory(dataset, out)
    if args.pseudo_masks == "box":
        export_masks(box_pseudo_masks(dataset, args.box_pad), out / "pseudo_masks")
    spec_dict = {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(spec).items()}
    write_manifest(out, "generate-data", spec.seed, spec_dict, args.spec,
                   {"samples": len(dataset), "pseudo_masks": args.pseudo_masks})
    print(f"wrote {len(dataset)} samples to {out}")
    return 0


# ---------------------------------------------------------------------------
# train


def _train_fold(cfg, fold, run_dir, plan_json):
    import torch

    from .training import train_classifier

    torch.set_num_threads(1)
    dataset = _load_dataset(cfg)
    plan = FoldPlan.from_json(plan_json)
    tc = train_config(cfg)
    pseudo = None
    if tc.mask_source == "external-directory":
        pseudo = load_pseudo_masks(cfg["data"]["pseudo_masks"], dataset, cfg["data"]["resize"], cfg["data"]["crop"])
    fold_dir = Path(run_dir) / str(fold)
    _, art = train_classifier(tc, dataset, plan.train_ids(fold), fold, pseudo, diagnostic_dir=fold_dir)
    art.write(fold_dir)
    last = art.log[-1]
    return fold, {"task_loss": last["task_loss"], "seconds": art.timings["total_seconds"]}


def cmd_train(args):
    overrides = {"train": {"seed": args.seed}} if args.seed is not None else None
    cfg = load_config(args.config, overrides=overrides)
    tc = train_config(cfg)
    dataset = _load_dataset(cfg)
    plan = make_folds(dataset, cfg["folds"]["k"], cfg["folds"]["seed"])
    if tc.mask_source == "external-directory":
        # fail before any training if a pseudo-mask is missing
        load_pseudo_masks(cfg["data"]["pseudo_masks"], dataset, cfg["data"]["resize"], cfg["data"]["crop"])
    base = Path(args.out or "runs") / dataset.name
    base.mkdir(parents=True, exist_ok=True)
    plan_path = base / "folds.json"
    if plan_path.exists() and FoldPlan.from_json(plan_path.read_text()) != plan:
        raise DataError(f"{plan_path} holds a different fold plan; use a fresh output directory")
    plan_path.write_text(plan.to_json() + "\n")

    run_dir = base / tc.method
    manifest_path = run_dir / "manifest.json"
    h = config_hash(cfg)
    if manifest_path.exists() and json.loads(manifest_path.read_text()).get("config_hash") != h:
        if not args.force:
            raise ValidationError(f"{run_dir} was trained with a different configuration; pass --force to retrain",
                                  ["<config>"])
        for d in _fold_dirs(run_dir):
            shutil.rmtree(d)
        manifest_path.unlink()
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.yaml").write_text(yaml.safe_dump(cfg, sort_keys=True))
    write_manifest(run_dir, "train", tc.seed, cfg, args.config, {"status": "running"})

    wanted = parse_folds(args.folds, plan.k)
    todo = [f for f in wanted if not (run_dir / str(f) / "weights.bin").exists()]
    for f in sorted(set(wanted) - set(todo)):
        print(f"fold {f}: complete, skipped")
    work = [(cfg, f, str(run_dir), plan.to_json()) for f in todo]
    if args.jobs > 1 and len(work) > 1:
        with _pool(args.jobs) as pool:
            results = list(pool.map(_train_fold, *zip(*work)))
    else:
        results = [_train_fold(*w) for w in work]
    for fold, info in results:
        print(f"fold {fold}: final task loss {info['task_loss']:.4f} ({info['seconds']:.1f}s)")
    done = [int(d.name) for d in _fold_dirs(run_dir) if (d / "weights.bin").exists()]
    write_manifest(run_dir, "train", tc.seed, cfg, args.config,
                   {"status": "complete" if len(done) == plan.k else "partial", "folds_done": done})
    return 0


# ---------------------------------------------------------------------------
# evaluate


def _verified_run(run_dir, config_path):
    run_dir = Path(run_dir)
    manifest_path = run_dir / "manifest.json"
    if not manifest_path.exists() or not (run_dir / "config.yaml").exists():
        raise DataError(f"{run_dir} is not a training run directory (no manifest.json/config.yaml)")
    manifest = json.loads(manifest_path.read_text())
    cfg = yaml.safe_load((run_dir / "config.yaml").read_text())
    if config_hash(cfg) != manifest.get("config_hash"):
        raise ValidationError(f"{run_dir}/config.yaml no longer matches the manifest hash; refusing to evaluate",
                              ["<config>"])
    if config_path is not None and config_hash(load_config(config_path)) != manifest["config_hash"]:
        raise ValidationError(f"{config_path} differs from the configuration {run_dir} was trained with; "
                              "refusing to evaluate", ["<config>"])
    return cfg


def _models(run_dir, image_size):
    from .training import load_model

    dirs = _fold_dirs(run_dir)
    if not dirs:
        raise DataError(f"{run_dir} contains no fold directories")
    for d in dirs:
        if not (d / "weights.bin").exists():
            raise DataError(f"{d}: missing weights.bin")
        model, _ = load_model(d, image_size=image_size)
        yield int(d.name), model


def _trial_csv(path, dataset_name, folds, values):
    from .stats import TrialMatrix

    TrialMatrix(np.array([values]), [dataset_name], [str(f) for f in folds]).to_csv(path)


def _eval_align(cfg, dataset, plan, run_dir, out):
    from .evaluation import alignment_eval

    rows, folds, means, table = [], [], [], []
    for fold, model in _models(run_dir, dataset.image_size[0]):
        records, summary = alignment_eval(model, dataset, plan.test_ids(fold), cfg["evaluate"]["tau"],
                                          cfg["train"]["capture_layer"])
        rows += [(fold, r.sample_id, repr(r.iou), r.tau) for r in records]
        folds.append(fold)
        means.append(summary["mean_iou"])
        table.append(f"| {fold} | {summary['mean_iou']:.3f} ± {summary['std_iou']:.3f} |")
    write_csv(out / "align.csv", ["fold", "sample_id", "iou", "tau"], rows)
    _trial_csv(out / "align_folds.csv", dataset.name, folds, means)
    overall = {"mean": float(np.mean(means)), "std": float(np.std(means))}
    lines = ["| fold | test IoU (mean ± std) |", "|---|---|", *table,
             f"| all | {overall['mean']:.3f} ± {overall['std']:.3f} |"]
    (out / "align_table.md").write_text("\n".join(lines) + "\n")
    write_json(out / "align_summary.json", {"per_fold": dict(zip(map(str, folds), means)), "overall": overall,
                                             "tau": cfg["evaluate"]["tau"]})
    print("\n".join(lines))
    return ["align.csv", "align_folds.csv", "align_table.md", "align_summary.json"]


def _eval_faith(cfg, dataset, plan, run_dir, out, all_samples=False):
    from .evaluation import (
        curve_band, faithfulness_for_ids, faithfulness_identities, dataset_attention, representative_ids,
        split_tensors,
    )
    from .plots import plot_faithfulness_bands

    ev = cfg["evaluate"]
    k_grid = tuple(range(0, 101, ev["k_step"]))
    curves = {"removal": [], "insertion": []}
    rows, per_fold, max_dev, complement = [], {}, 0.0, True
    for fold, model in _models(run_dir, dataset.image_size[0]):
        test = plan.test_ids(fold)
        ids = test if all_samples else representative_ids(dataset, test, ev["per_class"], ev["seed"] + fold)
        fc = faithfulness_for_ids(model, dataset, ids, k_grid, cfg["train"]["capture_layer"])
        x, _, labels = split_tensors(dataset, ids)
        maps = dataset_attention(model, dataset, ids, cfg["train"]["capture_layer"])[0]
        for img, lab, h in zip(x, labels, maps):
            dev, ok = faithfulness_identities(model, img, int(lab), h, k_grid)
            max_dev, complement = max(max_dev, dev), complement and ok
        per_fold[str(fold)] = {}
        for mode, cs in fc.items():
            curves[mode] += cs
            per_fold[str(fold)][mode] = float(np.mean([c.auc for c in cs]))
            rows += [(fold, c.sample_id, mode, int(k), repr(float(p))) for c in cs for k, p in zip(c.k_grid, c.confidence)]
    write_csv(out / "faith_curves.csv", ["fold", "sample_id", "mode", "k", "confidence"], rows)
    band_rows, summary = [], {"per_fold_auc": per_fold, "n_curves": len(curves["removal"]),
                              "max_endpoint_deviation": max_dev, "complement_identity": complement,
                              "samples": "all" if all_samples else f"{ev['per_class']} per class"}
    for mode, cs in curves.items():
        band = curve_band(cs, n_resamples=ev["n_resamples"], seed=ev["seed"])
        band_rows += [(mode, int(k), repr(float(m)), repr(float(lo)), repr(float(hi)))
                      for k, m, lo, hi in zip(band["k"], band["mean"], band["low"], band["high"])]
        summary[mode] = {"auc": band["auc"], "auc_ci": [band["auc_low"], band["auc_high"]]}
        folds = sorted(per_fold, key=int)
        _trial_csv(out / f"faith_{mode}_folds.csv", dataset.name, folds, [per_fold[f][mode] for f in folds])
    write_csv(out / "faith_bands.csv", ["mode", "k", "mean", "low", "high"], band_rows)
    write_json(out / "faith_summary.json", summary)
    plot_faithfulness_bands(out / "faith_bands.csv", out, label=Path(run_dir).name)
    print(f"removal AUC {summary['removal']['auc']:.4f}  insertion AUC {summary['insertion']['auc']:.4f}  "
          f"(endpoint deviation {max_dev:.2e}, complement identity {'holds' if complement else 'FAILS'})")
    return ["faith_curves.csv", "faith_bands.csv", "faith_summary.json", "faith_removal_folds.csv",
            "faith_insertion_folds.csv", "faith_removal.png", "faith_removal.svg", "faith_insertion.png",
            "faith_insertion.svg"]


def _eval_accuracy(cfg, dataset, plan, run_dir, out):
    from .evaluation import accuracy_eval

    rows = [(fold, accuracy_eval(model, dataset, plan.test_ids(fold)))
            for fold, model in _models(run_dir, dataset.image_size[0])]
    write_csv(out / "accuracy.csv", ["fold", "accuracy"], [(f, repr(a)) for f, a in rows])
    _trial_csv(out / "accuracy_folds.csv", dataset.name, [f for f, _ in rows], [a for _, a in rows])
    print(f"accuracy {np.mean([a for _, a in rows]):.4f} over {len(rows)} folds")
    return ["accuracy.csv", "accuracy_folds.csv"]


def cmd_evaluate(args):
    run_dir = Path(args.run_dir)
    cfg = _verified_run(run_dir, args.config)
    dataset = _load_dataset(cfg)
    plan_path = run_dir.parent / "folds.json"
    if not plan_path.exists():
        raise DataError(f"{plan_path} not found")
    plan = FoldPlan.from_json(plan_path.read_text())
    out = Path(args.out) if args.out else run_dir / "eval"
    out.mkdir(parents=True, exist_ok=True)
    which = EVAL_KINDS if not args.which or "all" in args.which else args.which
    produced = []
    for kind in which:
        if kind == "align":
            produced += _eval_align(cfg, dataset, plan, run_dir, out)
        elif kind == "faith":
            produced += _eval_faith(cfg, dataset, plan, run_dir, out, args.all_samples)
        else:
            produced += _eval_accuracy(cfg, dataset, plan, run_dir, out)
    previous = json.loads((out / "manifest.json").read_text()).get("outputs", []) if (out / "manifest.json").exists() else []
    write_manifest(out, "evaluate", cfg["train"]["seed"], cfg, run_dir / "config.yaml",
                   {"run_dir": str(run_dir), "outputs": sorted(set(previous) | set(produced))})
    return 0


# ---------------------------------------------------------------------------
# perturb-study


def _fmt(entry):
    if entry["mean"] == "undefined":
        return "undefined"
    return f"{entry['mean']:.2f} ± {entry['std']:.2f}"


def study_table(summary):
    lines = ["| perturbation | regularizer | Spearman | Pearson |", "|---|---|---|---|"]
    for kind in ("shift", "erode", "dilate"):
        for reg in ("camal", "suppress_only"):
            if kind in summary and reg in summary[kind]:
                e = summary[kind][reg]
                lines.append(f"| {kind} | {reg} | {_fmt(e['spearman'])} | {_fmt(e['pearson'])} |")
    return "\n".join(lines) + "\n"


def cmd_perturb_study(args):
    from .evaluation import DEFAULT_SEVERITIES, perturb_masks, regularizer_response_study
    from .plots import plot_perturbation_overlay

    if args.data:
        dataset = load_directory(args.data)
    else:
        dataset = generate_synthetic(_synthetic_spec(None, args.seed))
    ids = dataset.ids
    n = min(args.n_masks, len(ids))
    rng = np.random.default_rng(0 if args.seed is None else args.seed)
    chosen = sorted(rng.choice(ids, size=n, replace=False).tolist())
    masks = {i: dataset[i].mask for i in chosen}
    series, summary = regularizer_response_study(masks)
    out = Path(args.out or "perturb_study")
    rows = [(s.mask_id, s.kind, s.regularizer, " ".join(map(str, s.severities)),
             " ".join(repr(float(r)) for r in s.responses), s.spearman, s.pearson,
             " ".join(map(str, s.truncated))) for s in series]
    write_csv(out / "perturb_series.csv",
              ["mask_id", "kind", "regularizer", "severities", "responses", "spearman", "pearson", "truncated"], rows)
    write_json(out / "perturb_summary.json", {"n_masks": n, "summary": summary})
    table = study_table(summary)
    (out / "perturb_table.md").write_text(table)
    for mask_id in chosen[: args.overlays]:
        for kind in ("shift", "erode", "dilate"):
            pm = perturb_masks(masks[mask_id], kind, DEFAULT_SEVERITIES[kind])
            plot_perturbation_overlay(masks[mask_id], pm.maps, pm.severities, kind,
                                      out / "overlays" / f"{mask_id}_{kind}")
    write_manifest(out, "perturb-study", args.seed, extra={"n_masks": n, "source": args.data or "synthetic"})
    print(table, end="")
    return 0


# ---------------------------------------------------------------------------
# stats


def _paired(a, b):
    if a.values.shape != b.values.shape or a.col_labels != b.col_labels or a.row_labels != b.row_labels:
        raise PairingError(f"unpaired inputs: {a.values.shape} with trials {a.col_labels} vs "
                           f"{b.values.shape} with trials {b.col_labels}")


def cmd_stats(args):
    from .stats import TrialMatrix, poi_test, stratified_bootstrap, wsrt_one_tailed

    mats = [TrialMatrix.from_csv(p) for p in args.files]
    need = {"wsrt": 2, "poi": 2, "sbci": None}[args.test]
    if need is not None and len(mats) != need:
        raise ValidationError(f"{args.test} needs exactly {need} result files", ["files"])
    seed = 0 if args.seed is None else args.seed
    if args.test == "wsrt":
        _paired(*mats)
        outcome = wsrt_one_tailed(mats[0].values.ravel(), mats[1].values.ravel(), args.alternative)
        report = {"test": "wsrt", "files": args.files, **outcome.to_dict()}
        text = (f"WSRT ({outcome.method}, n={outcome.n}, H1: first {args.alternative}): T={outcome.statistic:g} "
                f"p={outcome.p_value:.6g} -> {'significant' if outcome.significant else 'not significant'} at 0.05")
    elif args.test == "poi":
        if mats[0].values.shape != mats[1].values.shape:
            raise PairingError(f"trial matrices differ in shape: {mats[0].values.shape} vs {mats[1].values.shape}")
        res = poi_test(mats[0], mats[1], args.n_resamples, seed=seed)
        report = {"test": "poi", "files": args.files, **res}
        text = (f"POI={res['poi']:.4f} 95% CI [{res['ci_low']:.4f}, {res['ci_high']:.4f}] -> "
                f"{'significant' if res['significant'] else 'not significant'}")
    else:
        results, lines = [], []
        for path, m in zip(args.files, mats):
            point, lo, hi = stratified_bootstrap(m, n_resamples=args.n_resamples, seed=seed)
            results.append({"file": path, "mean": point, "ci_low": lo, "ci_high": hi})
            lines.append(f"{path}: mean {point:.4f} 95% CI [{lo:.4f}, {hi:.4f}]")
        report = {"test": "sbci", "results": results}
        text = "\n".join(lines)
    print(text)
    if args.out:
        out = Path(args.out)
        write_json(out / f"stats_{args.test}.json", report)
        (out / f"stats_{args.test}.txt").write_text(text + "\n")
        write_manifest(out, "stats", seed, extra={"test": args.test, "files": args.files})
    return 0


# ---------------------------------------------------------------------------
# bench-overhead


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v]
    except ValueError:
        raise ValidationError(f"expected comma-separated integers, got {text!r}", [text]) from None


def cmd_bench_overhead(args):
    from .bench import extraction_scaling, step_overhead
    from .plots import plot_extraction, plot_overhead

    models = [m for m in args.models.split(",") if m]
    sizes = _int_list(args.batch_sizes)
    out = Path(args.out or "bench")
    seed = 0 if args.seed is None else args.seed
    steps, extraction, summary = [], [], {}
    for name in models:
        rows = step_overhead(name, sizes, args.image_size, repeats=args.repeats, seed=seed)
        ext, fit = extraction_scaling(name, [b for b in sizes if b > 1], args.image_size,
                                      repeats=4 * args.repeats + 1, seed=seed)
        steps += rows
        extraction += ext
        ratios = [r["ratio"] for r in ext]
        summary[name] = {"extraction_fit": fit, "extraction_ratio": dict(zip(map(str, [r["batch_size"] for r in ext]), ratios)),
                         "ratio_increasing": bool(all(b > a for a, b in zip(ratios, ratios[1:]))),
                         "camal_overhead": {str(r["batch_size"]): r["camal_overhead"] for r in rows}}
    step_keys = list(steps[0])
    write_csv(out / "overhead.csv", step_keys, [[r[k] for k in step_keys] for r in steps])
    ext_keys = list(extraction[0])
    write_csv(out / "extraction.csv", ext_keys, [[r[k] for k in ext_keys] for r in extraction])
    write_json(out / "bench_summary.json", summary)
    plot_overhead(out / "overhead.csv", out)
    plot_extraction(out / "extraction.csv", out)
    write_manifest(out, "bench-overhead", seed, extra={"models": models, "batch_sizes": sizes})
    for name, s in summary.items():
        f = s["extraction_fit"]
        print(f"{name}: per-sample slope {1e3 * f['slope']:.3f} ms/sample (R^2 {f['r2']:.3f}), "
              f"batch-level growth {f['batch_growth']:.2f}x, ratios {', '.join(f'{v:.1f}' for v in s['extraction_ratio'].values())}")
    return 0


# ---------------------------------------------------------------------------
# plot / repro


def cmd_plot(args):
    from .plots import PLOTTERS

    written = PLOTTERS[args.kind](args.csv, args.out or Path(args.csv).parent)
    print("\n".join(map(str, written)))
    return 0


def cmd_repro(args):
    from .repro import run_repro

    return run_repro(args.profile, Path(args.out or "repro_out"), jobs=args.jobs,
                     seed=0 if args.seed is None else args.seed, force=args.force)


# ---------------------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the seed")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--jobs", type=int, default=1, help="parallel worker processes")

    # the shared flags sit on each subcommand: a top-level copy would be reset by subparser defaults
    p = argparse.ArgumentParser(prog="camalkit", description="Attention-alignment training and evaluation toolkit.")
    p.add_argument("--version", action="version", version=f"camalkit {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", parents=[common], help="render the synthetic benchmark to disk")
    g.add_argument("--spec", help="YAML file with synthetic spec fields")
    g.add_argument("--pseudo-masks", choices=("none", "box"), default="none",
                   help="also write box-shaped pseudo-masks for the prior method")
    g.add_argument("--box-pad", type=int, default=3)
    g.set_defaults(func=cmd_generate_data)

    t = sub.add_parser("train", parents=[common], help="train every (or selected) fold")
    t.add_argument("--config", required=True)
    t.add_argument("--folds", help="subset such as 0-2 or 0,3,5")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", parents=[common], help="alignment, faithfulness or accuracy of a run")
    e.add_argument("run_dir")
    e.add_argument("--which", action="append", choices=(*EVAL_KINDS, "all"))
    e.add_argument("--config", help="refuse unless this config matches the run's")
    e.add_argument("--all-samples", action="store_true", help="faithfulness on every test sample")
    e.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("perturb-study", parents=[common], help="regularizer response to mask perturbations")
    s.add_argument("--data", help="dataset directory (default: synthetic benchmark)")
    s.add_argument("--n-masks", type=int, default=60)
    s.add_argument("--overlays", type=int, default=0, help="write overlay figures for this many masks")
    s.set_defaults(func=cmd_perturb_study)

    st = sub.add_parser("stats", parents=[common], help="WSRT, stratified bootstrap CI or POI on result CSVs")
    st.add_argument("--test", required=True, choices=("wsrt", "sbci", "poi"))
    st.add_argument("files", nargs="+")
    st.add_argument("--alternative", choices=("greater", "less"), default="greater")
    st.add_argument("--n-resamples", type=int, default=10_000)
    st.set_defaults(func=cmd_stats)

    b = sub.add_parser("bench-overhead", parents=[common], help="time extraction and training steps")
    b.add_argument("--models", default="tiny_cnn,tiny_vit")
    b.add_argument("--batch-sizes", default="1,4,8,16,32")
    b.add_argument("--image-size", type=int, default=64)
    b.add_argument("--repeats", type=int, default=5)
    b.set_defaults(func=cmd_bench_overhead)

    pl = sub.add_parser("plot", parents=[common], help="re-render a figure from its CSV")
    pl.add_argument("kind", choices=("faith", "overhead", "extraction"))
    pl.add_argument("csv")
    pl.set_defaults(func=cmd_plot)

    r = sub.add_parser("repro", parents=[common], help="scripted end-to-end reproduction")
    r.add_argument("--profile", choices=("smoke", "full-desk"), default="smoke")
    r.set_defaults(func=cmd_repro)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args) or 0
    except CamalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
