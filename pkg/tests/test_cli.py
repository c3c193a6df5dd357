import json

import pytest

from latentfold.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from latentfold.harness import read_table

from test_harness import tiny_config


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_fold_demo_deterministic(capsys):
    c1, out1, _ = run(capsys, "fold-demo", "--seed", "7")
    c2, out2, _ = run(capsys, "fold-demo", "--seed", "7")
    assert c1 == c2 == EXIT_OK
    assert out1 == out2
    lines = out1.splitlines()
    assert lines[0] == "layer,variance,objective,energy"
    _, other, _ = run(capsys, "fold-demo", "--seed", "8")
    assert other != out1


def test_fold_demo_energies_descend(capsys):
    _, out, _ = run(capsys, "fold-demo", "--seed", "3")
    flow = out.split("flow_step,energy\n")[1].splitlines()
    energies = [float(line.split(",")[1]) for line in flow]
    assert all(b <= a for a, b in zip(energies, energies[1:]))


def test_usage_errors(capsys, tmp_path):
    code, _, err = run(capsys, "compare")
    assert code == EXIT_USAGE and "usage" in err
    code, _, err = run(capsys, "compare", "--config", str(tmp_path / "missing.json"))
    assert code == EXIT_USAGE and "missing.json" in err
    code, _, err = run(capsys, "fold-demo", "--bogus")
    assert code == EXIT_USAGE and "usage" in err
    code, _, _ = run(capsys, "fold-demo", "--ablate", "everything")
    assert code == EXIT_USAGE
    code, _, _ = run(capsys)
    assert code == EXIT_USAGE


def test_runtime_error_exit_code(capsys, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"schema_version": 1, "data": {"x": "nowhere.txt"}, "training": {"seed": 0}}))
    code, _, err = run(capsys, "compare", "--config", str(bad))
    assert code == EXIT_RUNTIME and "nowhere.txt" in err


def test_compare_train_project_metrics(capsys, tmp_path):
    cfg = tiny_config(tmp_path)
    out = tmp_path / "cmp"
    code, _, _ = run(capsys, "compare", "--config", str(cfg), "--out", str(out))
    assert code == EXIT_OK
    for name in ("variance.csv", "heads.csv", "reorder.csv", "metrics.json"):
        assert (out / name).is_file()
    assert len(read_table(out / "variance.csv")) == 2

    code, stdout, _ = run(capsys, "train", "--config", str(cfg), "--out", str(out))
    assert code == EXIT_OK and "epoch 1" in stdout
    assert (out / "model.ckpt").is_file()

    code, _, _ = run(capsys, "project", "--config", str(cfg), "--out", str(out), "--layer", "1")
    assert code == EXIT_OK
    lines = (out / "projection_layer1.csv").read_text().splitlines()
    assert lines[0] == "token,x,y" and len(lines) == 17
    code, _, _ = run(capsys, "project", "--config", str(cfg), "--out", str(out), "--layer", "5")
    assert code == EXIT_USAGE

    code, stdout, _ = run(capsys, "metrics", "--config", str(cfg), "--out", str(out))
    assert code == EXIT_OK
    report = json.loads((out / "report.json").read_text())
    assert set(report) == {"variance", "head_utilization", "sparsity", "perplexity"}
    assert json.loads(stdout) == report


def test_corpus_command(capsys, tmp_path):
    code, stdout, _ = run(capsys, "corpus", "--out", str(tmp_path), "--bytes", "300", "--categories", "news")
    assert code == EXIT_OK
    paths = json.loads(stdout)
    assert len((tmp_path / "news" / "text.txt").read_bytes()) == 300 and "news" in paths
