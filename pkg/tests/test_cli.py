import json
import subprocess
import sys

import numpy as np
import pytest

from hybridivf import storage
from hybridivf.cli import default_parallelism, main
from hybridivf.filters import parse_filter
from hybridivf.oracle import exact_filtered_knn
from hybridivf.search import Query


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["gen", "--n", "20000", "--d", "64", "--m", "4", "--seed", "7", "--out", str(d / "data")]) == 0
    return d


@pytest.fixture(scope="module")
def built(data_dir):
    idx = data_dir / "idx"
    code = main(["--index", str(idx), "build", "--vectors", str(data_dir / "data/vectors.hvec"),
                 "--attrs", str(data_dir / "data/attrs.hatt"), "--k", "auto", "--seed", "7"])
    assert code == 0
    return idx


def test_gen_is_deterministic(tmp_path, capsys):
    code, out, _ = run(capsys, "gen", "--n", 500, "--d", 8, "--m", 2, "--seed", 3, "--out", tmp_path / "a", "--json")
    assert code == 0
    first = json.loads(out)["sha256"]
    _, out, _ = run(capsys, "--json", "gen", "--n", 500, "--d", 8, "--m", 2, "--seed", 3, "--out", tmp_path / "b")
    assert json.loads(out)["sha256"] == first
    assert storage.read_vectors(tmp_path / "a/vectors.hvec").shape == (500, 8)


def test_gen_rejects_zero(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["gen", "--n", "0", "--d", "8", "--m", "2", "--out", str(tmp_path)])
    assert exc.value.code == 2


def test_build_auto_k(built, capsys):
    # Auto K follows the N/1000 rule: 20 lists for 20,000 records.
    doc = json.loads((built / "manifest.json").read_text())
    assert doc["n_lists"] == 20 and doc["n_records"] == 20_000


def test_build_is_reproducible(data_dir, built, capsys):
    code, out, _ = run(capsys, "build", "--index", data_dir / "idx2", "--vectors", data_dir / "data/vectors.hvec",
                       "--attrs", data_dir / "data/attrs.hatt", "--seed", 7, "--json")
    assert code == 0
    doc = json.loads(out)
    assert doc["K"] == 20
    assert doc["centroids_sha256"] == storage.sha256_file(built / "centroids.bin")


def test_build_k_too_large(data_dir, capsys):
    code, _, err = run(capsys, "build", "--index", data_dir / "bad", "--vectors", data_dir / "data/vectors.hvec",
                       "--attrs", data_dir / "data/attrs.hatt", "--k", 50000)
    assert code == 2 and "error" in err


def test_build_refuses_existing(data_dir, built, capsys):
    code, _, _ = run(capsys, "build", "--index", built, "--vectors", data_dir / "data/vectors.hvec",
                     "--attrs", data_dir / "data/attrs.hatt")
    assert code == 2


def test_build_missing_file_is_io_error(tmp_path, capsys):
    code, _, _ = run(capsys, "build", "--index", tmp_path / "i", "--vectors", tmp_path / "nope.hvec",
                     "--attrs", tmp_path / "nope.hatt")
    assert code == 1


def test_search_matches_oracle(data_dir, built, capsys):
    vectors = storage.read_vectors(data_dir / "data/vectors.hvec")
    attrs = storage.read_attrs(data_dir / "data/attrs.hatt")
    qfile = data_dir / "q.json"
    qfile.write_text(json.dumps({"vector": vectors[5].tolist(), "filter": "a0 >= 0 AND a1 < 0", "k": 5}))
    code, out, _ = run(capsys, "search", "--index", built, "--query", qfile, "--probes", 20, "--stats")
    assert code == 0
    doc = json.loads(out)
    assert set(doc["timings"]) == {"centroid_search", "filtering", "detailed_search", "total"}
    assert doc["probes"] == 20
    want = exact_filtered_knn(vectors, attrs, Query(vectors[5], parse_filter("a0 >= 0 AND a1 < 0"), 5))
    assert [n["id"] for n in doc["neighbors"]] == [n.id for n in want]


def test_search_default_probes(built, capsys):
    vec = ",".join(["0.125"] * 64)
    code, out, _ = run(capsys, "search", "--index", built, "--vector", vec, "--stats")
    assert code == 0
    doc = json.loads(out)
    assert doc["probes"] == 7
    assert doc["load_stats"]["lists_loaded"] <= 7


def test_search_bad_filter(built, capsys):
    code, _, err = run(capsys, "search", "--index", built, "--vector", ",".join(["1"] * 64), "--filter", "a9 =")
    assert code == 2 and "offset 4" in err
    code, _, _ = run(capsys, "search", "--index", built, "--vector", ",".join(["1"] * 64), "--filter", "a9 = 1")
    assert code == 2


def test_search_wrong_dimension(built, capsys):
    code, _, _ = run(capsys, "search", "--index", built, "--vector", "1,2,3")
    assert code == 2


def test_search_corrupt_index(tmp_path, capsys):
    (tmp_path / "manifest.json").write_text("{not json")
    code, _, _ = run(capsys, "search", "--index", tmp_path, "--vector", "1")
    assert code == 1


def test_add_then_search(tmp_path, data_dir, capsys):
    idx = tmp_path / "idx"
    assert main(["build", "--index", str(idx), "--vectors", str(data_dir / "data/vectors.hvec"),
                 "--attrs", str(data_dir / "data/attrs.hatt"), "--k", "20", "--metric", "euclidean"]) == 0
    capsys.readouterr()
    rng = np.random.default_rng(0)
    v = rng.standard_normal(64)
    vec = ",".join(f"{x:.6f}" for x in v)
    code, out, _ = run(capsys, "add", "--index", idx, "--vector", vec, "--attrs", "40000,1,2,3", "--json")
    assert code == 0
    added = json.loads(out)
    assert added["id"] == 20_000
    code, out, _ = run(capsys, "search", "--index", idx, "--vector", vec, "--filter", "a0 = 40000", "--k", 1)
    assert json.loads(out)["neighbors"][0]["id"] == 20_000
    code, _, _ = run(capsys, "add", "--index", idx, "--vector", "1,2", "--attrs", "1,2,3,4")
    assert code == 2
    code, out, _ = run(capsys, "add", "--index", idx, "--vector", vec, "--attrs", "1,1,1,1", "--flush", "--json")
    assert code == 0 and json.loads(out)["id"] == 20_001
    assert not (idx / "segments").exists()


def test_threads_env(monkeypatch):
    monkeypatch.setenv("HYBRIDIVF_THREADS", "3")
    assert default_parallelism() == 3
    monkeypatch.setenv("HYBRIDIVF_THREADS", "zero")
    with pytest.raises(ValueError):
        default_parallelism()


def test_bench_writes_report_and_figures(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("HYBRIDIVF_THREADS", "2")
    out = tmp_path / "bench"
    code, stdout, _ = run(capsys, "bench", "--n", 3000, "--d", 16, "--m", 3, "--queries", 10,
                          "--probes-sweep", "1,3,K", "--k", 30, "--out", out, "--seed", 2, "--compare-parallelism")
    assert code == 0
    doc = json.loads((out / "report.json").read_text())
    assert doc["meta"]["parallelism"] == 2
    assert doc["meta"]["recall_identical_across_parallelism"] is True
    assert [r["probes"] for r in doc["sweep"]] == [1, 3, 30]
    assert doc["sweep"][-1]["mean_recall"] == 1.0
    assert (out / "recall.png").read_bytes()[:4] == b"\x89PNG"
    assert (out / "timings.png").exists()
    text = (out / "report.txt").read_text()
    assert "Detailed search in clusters" in text
    assert "recall@10" in stdout


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "hybridivf", "gen", "--n", "10", "--d", "2", "--m", "1",
                           "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    proc = subprocess.run([sys.executable, "-m", "hybridivf", "frobnicate"], capture_output=True, text=True)
    assert proc.returncode == 2
