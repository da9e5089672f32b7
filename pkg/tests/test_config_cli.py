import json
import shutil

import pytest
import yaml

from camalkit.cli import main, parse_folds
from camalkit.config import config_hash, default_config, env_overrides, load_config, train_config
from camalkit.errors import ValidationError
from camalkit.stats import TrialMatrix


def test_defaults_validate():
    cfg = load_config(environ={})
    assert cfg == default_config()
    assert train_config(cfg).method == "camal" and cfg["evaluate"]["tau"] == 0.7


def test_file_env_and_override_precedence(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("train: {epochs: 4, lambda: 0.5}\nevaluate: {tau: 0.6}\n")
    cfg = load_config(path, environ={"CAMALKIT_TRAIN__EPOCHS": "7", "OTHER": "x"},
                      overrides={"evaluate": {"tau": 0.8}})
    assert cfg["train"]["epochs"] == 7 and cfg["train"]["lambda"] == 0.5 and cfg["evaluate"]["tau"] == 0.8


def test_env_values_parse_as_yaml():
    assert env_overrides({"CAMALKIT_TRAIN__THROUGH_WEIGHTS": "false", "CAMALKIT_DATA__ROOT": "d"}) == {
        "train": {"through_weights": False}, "data": {"root": "d"}}


@pytest.mark.parametrize("content,key", [
    ("train: {epochz: 3}", "train.epochz"),
    ("bogus: 1", "bogus"),
    ("evaluate: {tau: 1.5}", "evaluate.tau"),
    ("evaluate: {k_step: 7}", "evaluate.k_step"),
    ("folds: {k: 1}", "folds.k"),
    ("train: {method: prior}", "data.pseudo_masks"),
    ("train: {lambda: -1}", "train.lambda"),
])
def test_invalid_configs_name_the_key(tmp_path, content, key):
    path = tmp_path / "c.yaml"
    path.write_text(content)
    with pytest.raises(ValidationError) as info:
        load_config(path, environ={})
    assert key in info.value.keys


def test_not_yaml(tmp_path):
    (tmp_path / "c.yaml").write_text("train: [unclosed")
    with pytest.raises(ValidationError):
        load_config(tmp_path / "c.yaml", environ={})


def test_config_hash_is_order_independent():
    a = default_config()
    b = json.loads(json.dumps(a, sort_keys=True))
    assert config_hash(a) == config_hash(b)
    b["train"]["epochs"] += 1
    assert config_hash(a) != config_hash(b)


def test_parse_folds():
    assert parse_folds("0-2,5", 10) == [0, 1, 2, 5]
    assert parse_folds(None, 3) == [0, 1, 2]
    for bad in ("a", "0-12"):
        with pytest.raises(ValidationError):
            parse_folds(bad, 10)


# ---------------------------------------------------------------------------
# end to end on a tiny benchmark


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = root / "spec.yaml"
    spec.write_text("samples_per_class: 6\nimage_size: [32, 32]\nseed: 2\n")
    assert main(["generate-data", "--spec", str(spec), "--out", str(root / "data"), "--pseudo-masks", "box"]) == 0
    configs = {}
    for method in ("vanilla", "camal", "prior"):
        cfg = {"data": {"root": str(root / "data"),
                        "pseudo_masks": str(root / "data" / "pseudo_masks") if method == "prior" else None},
               "folds": {"k": 3},
               "train": {"method": method, "epochs": 1, "batch_size": 8},
               "evaluate": {"n_resamples": 1000, "k_step": 25}}
        configs[method] = root / f"{method}.yaml"
        configs[method].write_text(yaml.safe_dump(cfg))
        assert main(["train", "--config", str(configs[method]), "--out", str(root / "runs")]) == 0
        assert main(["evaluate", str(root / "runs" / "synthetic" / method), "--which", "all"]) == 0
    return root, configs


def test_generate_refuses_non_empty(workspace, capsys):
    root, _ = workspace
    assert main(["generate-data", "--out", str(root / "data")]) == 2
    assert "--force" in capsys.readouterr().err


def test_run_layout(workspace):
    root, _ = workspace
    run = root / "runs" / "synthetic" / "camal"
    assert (root / "runs" / "synthetic" / "folds.json").exists()
    assert sorted(p.name for p in run.iterdir() if p.is_dir()) == ["0", "1", "2", "eval"]
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["status"] == "complete" and manifest["folds_done"] == [0, 1, 2]
    ev = run / "eval"
    for name in ("align.csv", "align_folds.csv", "align_table.md", "accuracy_folds.csv", "faith_curves.csv",
                 "faith_bands.csv", "faith_removal.png", "faith_insertion.svg"):
        assert (ev / name).exists(), name
    summary = json.loads((ev / "faith_summary.json").read_text())
    assert summary["max_endpoint_deviation"] <= 1e-6 and summary["complement_identity"]
    folds = TrialMatrix.from_csv(ev / "align_folds.csv")
    assert folds.values.shape == (1, 3)


def test_train_resumes_and_guards_config(workspace, capsys):
    root, configs = workspace
    assert main(["train", "--config", str(configs["camal"]), "--out", str(root / "runs")]) == 0
    assert capsys.readouterr().out.count("complete, skipped") == 3
    changed = root / "changed.yaml"
    cfg = yaml.safe_load(configs["camal"].read_text())
    cfg["train"]["epochs"] = 2
    changed.write_text(yaml.safe_dump(cfg))
    assert main(["train", "--config", str(changed), "--out", str(root / "runs"), "--folds", "0"]) == 2
    run = str(root / "runs" / "synthetic" / "camal")
    assert main(["evaluate", run, "--which", "accuracy", "--config", str(changed)]) == 2


def test_stats_commands(workspace, tmp_path):
    root, _ = workspace
    ev = root / "runs" / "synthetic"
    a, b = str(ev / "camal/eval/accuracy_folds.csv"), str(ev / "vanilla/eval/accuracy_folds.csv")
    assert main(["stats", "--test", "poi", a, b, "--out", str(tmp_path), "--n-resamples", "1000"]) == 0
    res = json.loads((tmp_path / "stats_poi.json").read_text())
    assert 0 <= res["poi"] <= 1
    assert main(["stats", "--test", "sbci", a, "--n-resamples", "1000"]) == 0
    # three folds are too few pairs for the signed-rank test
    assert main(["stats", "--test", "wsrt", a, b]) == 3
    TrialMatrix([[0.1, 0.2]], ["synthetic"], ["0", "1"]).to_csv(tmp_path / "short.csv")
    assert main(["stats", "--test", "wsrt", a, str(tmp_path / "short.csv")]) == 3


def test_prior_missing_pseudo_mask_is_data_error(workspace, tmp_path):
    root, configs = workspace
    pm = tmp_path / "pm"
    shutil.copytree(root / "data" / "pseudo_masks", pm)
    next(pm.iterdir()).unlink()
    cfg = yaml.safe_load(configs["prior"].read_text())
    cfg["data"]["pseudo_masks"] = str(pm)
    path = tmp_path / "prior.yaml"
    path.write_text(yaml.safe_dump(cfg))
    assert main(["train", "--config", str(path), "--out", str(tmp_path / "runs")]) == 3


def test_perturb_study_and_plot(tmp_path):
    assert main(["perturb-study", "--out", str(tmp_path / "p"), "--n-masks", "6", "--overlays", "1"]) == 0
    table = (tmp_path / "p" / "perturb_table.md").read_text()
    assert "| erode | suppress_only | undefined | undefined |" in table
    assert len(list((tmp_path / "p" / "overlays").glob("*.png"))) == 3


def test_missing_dataset_exit_code(tmp_path):
    (tmp_path / "c.yaml").write_text(yaml.safe_dump({"data": {"root": str(tmp_path / "nope")}}))
    assert main(["train", "--config", str(tmp_path / "c.yaml"), "--out", str(tmp_path)]) == 3
