import json
from pathlib import Path

import numpy as np
import pytest

from gisst.cli import RunConfig, main, write_manifest
from gisst.graph import load_dataset
from gisst.model import ModelConfig, load_checkpoint


def run_cli(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def tiny_dataset_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "tiny.json"
    code = run_cli("generate", "--kind", "noisy-ba-house", "--seed", 3,
                   "-o", path, "--param", "num_base=30", "--param", "num_motifs=6",
                   "--param", "ba_m=2")
    assert code == 0
    return path


@pytest.fixture(scope="module")
def tiny_checkpoints(tmp_path_factory, tiny_dataset_file):
    out = {}
    for kind in ("gisst", "gcn"):
        out_dir = tmp_path_factory.mktemp(f"train_{kind}")
        code = run_cli("train", "--dataset", tiny_dataset_file, "--seed", 5,
                       "--out", out_dir, "--kind", kind, "--hidden-units", 8,
                       "--num-layers", 2, "--epochs", 40, "--learning-rate", 0.01)
        assert code == 0
        out[kind] = out_dir / "checkpoint.json"
    return out


# --- generate -------------------------------------------------------------------


def test_generate_full_size_and_byte_identical(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    for out in (a, b):
        assert run_cli("generate", "--kind", "noisy-ba-house", "--seed", 1,
                       "-o", out) == 0
    assert a.read_bytes() == b.read_bytes()
    assert load_dataset(a).graph.num_nodes == 700


def test_generate_unknown_kind_exits_with_usage(capsys):
    with pytest.raises(SystemExit) as err:
        run_cli("generate", "--kind", "mystery", "--seed", 1, "-o", "x.json")
    assert err.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_generate_requires_seed(capsys):
    with pytest.raises(SystemExit):
        run_cli("generate", "--kind", "noisy-ba-house", "-o", "x.json")


def test_generate_bad_param(capsys):
    with pytest.raises(SystemExit):
        run_cli("generate", "--kind", "noisy-ba-house", "--seed", 1, "-o", "x.json",
                "--param", "num_base=lots")


# --- train -----------------------------------------------------------------------


def test_train_outputs(tiny_checkpoints, tiny_dataset_file):
    out_dir = tiny_checkpoints["gisst"].parent
    for name in ("checkpoint.json", "report.json", "metrics.csv", "manifest.json"):
        assert (out_dir / name).exists()
    model = load_checkpoint(tiny_checkpoints["gisst"])
    assert model.kind == "gisst"
    csv_lines = (out_dir / "metrics.csv").read_text().splitlines()
    assert len(csv_lines) == 41  # header + one row per epoch


def test_train_zero_epochs(tmp_path, tiny_dataset_file):
    assert run_cli("train", "--dataset", tiny_dataset_file, "--seed", 2,
                   "--out", tmp_path, "--epochs", 0, "--hidden-units", 4,
                   "--num-layers", 2) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["epochs"] == []
    assert load_checkpoint(tmp_path / "checkpoint.json").config.epochs == 0


def test_train_missing_dataset(tmp_path, capsys):
    code = run_cli("train", "--dataset", tmp_path / "nope.json", "--seed", 1,
                   "--out", tmp_path)
    assert code == 1
    assert "error:" in capsys.readouterr().err


# --- explain -----------------------------------------------------------------------


def test_explain_writes_restricted_scores(tmp_path, tiny_dataset_file, tiny_checkpoints):
    from gisst.graph import k_hop_subgraph

    ds = load_dataset(tiny_dataset_file)
    target = int(ds.graph.test_idx[0])
    assert run_cli("explain", "--checkpoint", tiny_checkpoints["gisst"],
                   "--dataset", tiny_dataset_file, "--method", "gisst-grad",
                   "--target", target, "--out", tmp_path, "--dot") == 0
    doc = json.loads((tmp_path / f"gisst-grad_{target}.json").read_text())
    allowed = k_hop_subgraph(ds.graph, target, 2).pair_set()
    assert {(u, v) for u, v, _ in doc["edge_scores"]} <= allowed
    assert (tmp_path / f"gisst-grad_{target}.dot").exists()


def test_explain_incompatible_method(tmp_path, tiny_dataset_file, tiny_checkpoints, capsys):
    code = run_cli("explain", "--checkpoint", tiny_checkpoints["gcn"],
                   "--dataset", tiny_dataset_file, "--method", "gisst-grad",
                   "--target", 0, "--out", tmp_path)
    assert code == 1
    assert "needs a 'gisst' checkpoint" in capsys.readouterr().err


def test_explain_all_test_motifs_group(tmp_path, tiny_dataset_file, tiny_checkpoints):
    assert run_cli("explain", "--checkpoint", tiny_checkpoints["gisst"],
                   "--dataset", tiny_dataset_file, "--method", "gisst-grad",
                   "--all-test-motifs", "--group", "--out", tmp_path) == 0
    doc = json.loads((tmp_path / "gisst-grad_group.json").read_text())
    assert isinstance(doc["target"], list)


# --- evaluate ---------------------------------------------------------------------


def test_evaluate_with_checkpoints(tmp_path, tiny_dataset_file, tiny_checkpoints):
    out = tmp_path / "eval"
    assert run_cli("evaluate", "--dataset", tiny_dataset_file,
                   "--gisst-checkpoint", tiny_checkpoints["gisst"],
                   "--gcn-checkpoint", tiny_checkpoints["gcn"],
                   "--methods", "gisst-grad,grad", "--out", out) == 0
    lines = (out / "metrics.csv").read_text().splitlines()
    assert lines[0] == "dataset,method,metric,mean,n"
    assert len(lines) == 13
    methods = {line.split(",")[1] for line in lines[1:]}
    assert methods == {"gisst-grad", "grad"}


def test_evaluate_parallel_matches_sequential(tmp_path, tiny_dataset_file, tiny_checkpoints):
    seq, par = tmp_path / "seq", tmp_path / "par"
    for out, workers in ((seq, 1), (par, 2)):
        assert run_cli("evaluate", "--dataset", tiny_dataset_file,
                       "--gisst-checkpoint", tiny_checkpoints["gisst"],
                       "--methods", "gisst-grad", "--out", out,
                       "--parallel", workers) == 0
    assert (seq / "metrics.csv").read_text() == (par / "metrics.csv").read_text()


def test_evaluate_from_explanations_dir(tmp_path, tiny_dataset_file, tiny_checkpoints):
    expl_dir = tmp_path / "expl"
    assert run_cli("explain", "--checkpoint", tiny_checkpoints["gisst"],
                   "--dataset", tiny_dataset_file, "--method", "gisst-grad",
                   "--all-test-motifs", "--out", expl_dir) == 0
    out = tmp_path / "eval"
    assert run_cli("evaluate", "--explanations", expl_dir,
                   "--dataset", tiny_dataset_file, "--out", out) == 0
    lines = (out / "metrics.csv").read_text().splitlines()
    assert len(lines) == 7


def test_evaluate_pipeline_from_config(tmp_path):
    run = RunConfig(
        dataset_kind="noisy-ba-house", data_seed=4, train_seed=6,
        model=ModelConfig(hidden_units=8, num_layers=2, epochs=30,
                          learning_rate=0.01),
        dataset_params={"num_base": 30, "num_motifs": 6, "ba_m": 2},
        methods=["gisst-grad", "gisst-global"], out_dir=str(tmp_path / "runA"),
    )
    config_path = tmp_path / "run.json"
    config_path.write_text(run.to_json())
    assert run_cli("evaluate", "--config", config_path) == 0
    out = Path(run.out_dir)
    for name in ("dataset.json", "checkpoint_gisst.json", "report_gisst.json",
                 "metrics_gisst.csv", "metrics.csv", "manifest.json"):
        assert (out / name).exists()


def test_evaluate_pipeline_reruns_identically(tmp_path):
    def one_run(tag):
        out_dir = tmp_path / tag
        run = RunConfig(
            dataset_kind="noisy-tree-cycle", data_seed=8, train_seed=9,
            model=ModelConfig(hidden_units=6, num_layers=2, epochs=8,
                              learning_rate=0.01),
            dataset_params={"depth": 4, "num_motifs": 4},
            methods=["gisst-grad"], out_dir=str(out_dir),
        )
        path = tmp_path / f"{tag}.json"
        path.write_text(run.to_json())
        assert run_cli("evaluate", "--config", path) == 0
        return out_dir

    a, b = one_run("a"), one_run("b")
    manifest_a = json.loads((a / "manifest.json").read_text())
    manifest_b = json.loads((b / "manifest.json").read_text())
    assert manifest_a["outputs"] == manifest_b["outputs"]
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()


def test_evaluate_empty_methods(tmp_path, tiny_dataset_file):
    out = tmp_path / "eval"
    run = RunConfig(
        dataset_kind="noisy-ba-house", data_seed=4, train_seed=6,
        model=ModelConfig(hidden_units=4, num_layers=2, epochs=1),
        dataset_params={"num_base": 30, "num_motifs": 6, "ba_m": 2},
        methods=[], out_dir=str(out),
    )
    path = tmp_path / "empty.json"
    path.write_text(run.to_json())
    assert run_cli("evaluate", "--config", path) == 0
    assert (out / "metrics.csv").read_text() == "dataset,method,metric,mean,n\n"


def test_evaluate_requires_some_mode(capsys):
    assert run_cli("evaluate", "--top-k", 40) == 1
    assert "need --config" in capsys.readouterr().err


# --- run config and manifest ----------------------------------------------------------


def test_run_config_roundtrip_normalized():
    run = RunConfig(dataset_kind="noisy-tree-grid", data_seed=1, train_seed=2,
                    methods=["grad"], top_k=40)
    again = RunConfig.from_json(run.to_json())
    assert again == run
    assert again.to_json() == run.to_json()


def test_run_config_rejects_unknown_keys():
    doc = RunConfig(dataset_kind="noisy-ba-house", data_seed=1, train_seed=2).to_dict()
    doc["shiny"] = True
    with pytest.raises(ValueError, match="unknown run config keys"):
        RunConfig.from_dict(doc)
    bad_model = RunConfig(dataset_kind="noisy-ba-house", data_seed=1, train_seed=2).to_dict()
    bad_model["model"]["magic"] = 1
    with pytest.raises(ValueError, match="unknown model config keys"):
        RunConfig.from_dict(bad_model)


def test_run_config_validates_methods_and_kind():
    with pytest.raises(ValueError, match="unknown methods"):
        RunConfig(dataset_kind="noisy-ba-house", data_seed=1, train_seed=2,
                  methods=["sorcery"])
    with pytest.raises(ValueError, match="unknown dataset kind"):
        RunConfig(dataset_kind="bogus", data_seed=1, train_seed=2)


def test_manifest_hashes_are_correct(tmp_path):
    import hashlib

    (tmp_path / "x.txt").write_text("hello")
    (tmp_path / "sub").mkdir()
    (tmp_path / "sub" / "y.txt").write_text("world")
    write_manifest(tmp_path, "test", {"k": 1})
    doc = json.loads((tmp_path / "manifest.json").read_text())
    assert set(doc["outputs"]) == {"x.txt", "sub/y.txt"}
    assert doc["outputs"]["x.txt"]["sha256"] == hashlib.sha256(b"hello").hexdigest()
    assert doc["command"] == "test"
    assert "timestamp" not in json.dumps(doc)


def test_out_root_env_var(tmp_path, monkeypatch):
    monkeypatch.setenv("GISST_OUT_ROOT", str(tmp_path))
    assert run_cli("generate", "--kind", "noisy-tree-cycle", "--seed", 0,
                   "-o", "nested/ds.json", "--param", "depth=4",
                   "--param", "num_motifs=3") == 0
    assert (tmp_path / "nested" / "ds.json").exists()
