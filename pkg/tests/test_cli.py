import csv
import hashlib
import json

import pytest

from nodetriage.cli import main
from nodetriage.scheduling import parse_scheduler_weights

SMALL = ["--nodes", "400", "--outliers", "12", "--samples", "12"]


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run(*argv):
    assert main([str(a) for a in argv]) == 0


@pytest.fixture(scope="module")
def fleet(tmp_path_factory):
    d = tmp_path_factory.mktemp("fleet")
    run("simulate", *SMALL, "--seed", 3, "--out-dir", d)
    run("ingest", "--samples", d / "samples.csv", "--out-dir", d)
    return d


def test_simulate_full_size_row_count(tmp_path):
    run("simulate", "--nodes", 9327, "--outliers", 33, "--samples", 50, "--seed", 42,
        "--out-dir", tmp_path)
    with open(tmp_path / "samples.csv") as fh:
        rows = sum(1 for _ in fh) - 1
    assert rows == 9327 * 12 * 50
    assert len((tmp_path / "truth.txt").read_text().split()) == 33
    manifest = json.loads((tmp_path / "manifest-simulate.json").read_text())
    assert manifest["outputs"]["samples.csv"] == digest(tmp_path / "samples.csv")


def test_simulate_zero_outliers(tmp_path):
    run("simulate", "--nodes", 20, "--outliers", 0, "--samples", 2, "--out-dir", tmp_path)
    assert (tmp_path / "truth.txt").read_text() == ""


def test_simulate_digests_repeat(tmp_path, fleet):
    run("simulate", *SMALL, "--seed", 3, "--out-dir", tmp_path)
    for name in ("samples.csv", "truth.txt", "fleet.toml"):
        assert digest(tmp_path / name) == digest(fleet / name)


def test_simulate_from_config(tmp_path, fleet):
    run("simulate", "--config", fleet / "fleet.toml", "--out-dir", tmp_path)
    assert digest(tmp_path / "samples.csv") == digest(fleet / "samples.csv")


def test_analyze_single_pair(tmp_path, fleet):
    run("analyze", "--matrix", fleet / "features.csv", "--method", "mahalanobis",
        "--features", "HPL Mean,MPI DGEMM Mean", "--out-dir", tmp_path)
    rep = json.loads((tmp_path / "report-mahalanobis.json").read_text())
    assert rep["method"] == "mahalanobis"
    assert rep["subset"] == ["HPL Mean", "MPI DGEMM Mean"]


def test_analyze_composite(tmp_path, fleet):
    run("analyze", "--matrix", fleet / "features.csv", "--method", "composite", "--out-dir", tmp_path)
    rep = json.loads((tmp_path / "report-composite.json").read_text())
    assert rep["threshold"] == 7190.0
    assert all(f["score"] < 7190.0 for f in rep["flagged"])
    truth = set((fleet / "truth.txt").read_text().split())
    assert {f["node_id"] for f in rep["flagged"]} <= truth


def test_analyze_subset_enumeration_and_map(tmp_path, fleet):
    run("analyze", "--matrix", fleet / "features.csv", "--method", "mahalanobis",
        "--whitelist", "HPL Mean,MPI DGEMM Mean,MPI NBODY Mean", "--method", "kmeans-map",
        "--out-dir", tmp_path)
    reps = json.loads((tmp_path / "report-mahalanobis.json").read_text())
    assert len(reps) == 3
    rows = list(csv.DictReader(open(tmp_path / "map.csv")))
    assert len(rows) == 400 and {r["cluster"] for r in rows} <= {"1", "2", "3"}
    assert (tmp_path / "map.svg").read_text().startswith("<svg")


def test_analyze_nn_twice_identical(tmp_path, fleet):
    outs = []
    for i in range(2):
        d = tmp_path / str(i)
        run("analyze", "--matrix", fleet / "features.csv", "--method", "nn", "--seed", 7,
            "--epochs", 4, "--hidden", "32,8", "--out-dir", d)
        outs.append(d)
    for name in ("report-nn.json", "model.json", "predictions.csv"):
        assert digest(outs[0] / name) == digest(outs[1] / name)


def test_evaluate_tables(tmp_path, fleet):
    a = tmp_path / "a"
    run("analyze", "--matrix", fleet / "features.csv", "--method", "composite", "--method", "nn",
        "--method", "mahalanobis", "--features", "HPL Mean,MPI DGEMM Mean", "--epochs", 4,
        "--hidden", "32,8", "--out-dir", a)
    one = tmp_path / "one"
    run("evaluate", "--matrix", fleet / "features.csv", "--truth", fleet / "truth.txt",
        "--reports", a / "report-composite.json", "--out-dir", one)
    assert len(list(csv.DictReader(open(one / "comparison.csv")))) == 1
    three = tmp_path / "three"
    run("evaluate", "--matrix", fleet / "features.csv", "--truth", fleet / "truth.txt",
        "--reports", a / "report-composite.json", a / "report-mahalanobis.json",
        a / "report-nn.json", "--out-dir", three)
    rows = list(csv.DictReader(open(three / "comparison.csv")))
    assert sorted(r["method"] for r in rows) == ["composite", "mahalanobis", "nn"]
    keys = [(-float(r["recall"]), int(r["fp"])) for r in rows]
    assert keys == sorted(keys)


def test_evaluate_empty_report(tmp_path, fleet):
    empty = tmp_path / "empty.json"
    empty.write_text("")
    run("evaluate", "--matrix", fleet / "features.csv", "--truth", fleet / "truth.txt",
        "--reports", empty, "--out-dir", tmp_path)
    rows = list(csv.DictReader(open(tmp_path / "comparison.csv")))
    assert len(rows) == 1 and float(rows[0]["recall"]) == 0.0


def test_schedule_by_feature(tmp_path, fleet):
    run("schedule", "--matrix", fleet / "features.csv", "--by", "HPL Mean", "--out-dir", tmp_path)
    order = [n for n, _ in parse_scheduler_weights((tmp_path / "weights.txt").read_text())]
    feats = list(csv.reader(open(fleet / "features.csv")))
    col = feats[0].index("HPL Mean")
    hpl = {r[0]: float(r[col]) for r in feats[1:]}
    assert order == sorted(hpl, key=lambda n: (-hpl[n], n))
    plan = json.loads((tmp_path / "mitigation.json").read_text())
    assert all(v["sigma"] < -1 for v in plan["nodes"].values())
    first = digest(tmp_path / "weights.txt"), digest(tmp_path / "mitigation.json")
    run("schedule", "--matrix", fleet / "features.csv", "--by", "HPL Mean", "--out-dir", tmp_path)
    assert (digest(tmp_path / "weights.txt"), digest(tmp_path / "mitigation.json")) == first


def test_schedule_by_nn_prediction(tmp_path, fleet):
    run("analyze", "--matrix", fleet / "features.csv", "--method", "nn", "--epochs", 3,
        "--hidden", "16,4", "--out-dir", tmp_path)
    run("schedule", "--matrix", fleet / "features.csv", "--by", "nn-prediction",
        "--model", tmp_path / "model.json", "--reports", tmp_path / "report-nn.json",
        "--out-dir", tmp_path)
    pred = {r["node_id"]: float(r["predicted"]) for r in csv.DictReader(open(tmp_path / "predictions.csv"))}
    order = [n for n, _ in parse_scheduler_weights((tmp_path / "weights.txt").read_text())]
    assert order == sorted(pred, key=lambda n: (-pred[n], n))


def test_report(tmp_path, fleet):
    run("report", "--samples", fleet / "samples.csv", "--truth", fleet / "truth.txt",
        "--out-dir", tmp_path)
    text = (tmp_path / "report.md").read_text()
    assert "## Detector comparison" in text and "Predicted Positive" in text
    assert len((tmp_path / "boxplot.csv").read_text().splitlines()) == 1 + 70 + 11 + 11


def test_inputs_not_mutated(tmp_path, fleet):
    before = digest(fleet / "features.csv")
    run("analyze", "--matrix", fleet / "features.csv", "--method", "sigma", "--out-dir", tmp_path)
    assert digest(fleet / "features.csv") == before
    manifest = json.loads((tmp_path / "manifest-analyze.json").read_text())
    assert manifest["inputs"][str(fleet / "features.csv")] == before


def test_errors_are_single_line(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("node_id,app_id,sample_index,value\nn1,HPL,0,-1\n")
    assert main(["ingest", "--samples", str(bad), "--out-dir", str(tmp_path)]) == 1
    err = capsys.readouterr().err
    assert err.count("\n") == 1 and err.startswith("error: IngestError: line 2")
    assert not (tmp_path / "features.csv").exists()
    assert main(["evaluate", "--reports", "x.json", "--truth", str(tmp_path / "nope"),
                 "--samples", str(bad), "--out-dir", str(tmp_path)]) == 1
    assert capsys.readouterr().err.startswith("error: FileNotFoundError")
    with pytest.raises(SystemExit) as exc:
        main(["analyze", "--method", "bogus"])
    assert exc.value.code == 2
    assert capsys.readouterr().err.startswith("error: usage:")
