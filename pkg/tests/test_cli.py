import csv
import json

import numpy as np
import pytest

from cplvm import __version__
from cplvm.cli import main
from cplvm.counts import CountMatrix, save_counts

FAST = ["--steps", "60", "--final-samples", "5"]


def read_dir(path):
    return {p.name: p.read_bytes() for p in sorted(path.iterdir()) if p.is_file()}


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def toy(tmp_path):
    rng = np.random.default_rng(0)
    Y = rng.poisson(3.0, (6, 12)) + 1
    X = rng.poisson(3.0, (6, 10)) + 1
    genes = tuple(f"g{i}" for i in range(6))
    bg, fg = tmp_path / "bg.csv", tmp_path / "fg.csv"
    save_counts(CountMatrix(Y, genes, tuple(f"b{j}" for j in range(12))), bg)
    save_counts(CountMatrix(X, genes, tuple(f"f{j}" for j in range(10))), fg)
    gmt = tmp_path / "sets.gmt"
    gmt.write_text("A\tna\tg0\tg1\nB\tna\tg2\tg3\tmissing\nC\tna\tg4\tg5\n", encoding="utf-8")
    return {"bg": str(bg), "fg": str(fg), "gmt": str(gmt), "dir": tmp_path}


def pair_args(toy):
    return ["--bg", toy["bg"], "--fg", toy["fg"], "--k1", "1", "--k2", "1"]


def test_simulate_copula_byte_identical(tmp_path):
    assert main(["simulate", "copula", "--seed", "1", "--out", str(tmp_path / "a" / "new")]) == 0
    first = read_dir(tmp_path / "a" / "new")
    assert {"copula_background.csv", "copula_foreground.csv", "copula.json", "run_config.json"} <= set(first)
    assert main(["simulate", "copula", "--seed", "1", "--out", str(tmp_path / "a" / "new")]) == 0
    assert read_dir(tmp_path / "a" / "new") == first
    assert b"\r\n" not in first["copula_background.csv"]
    cfg = json.loads(first["run_config.json"])
    assert cfg["version"] == __version__ and cfg["config"]["seed"] == 1


def test_simulate_geneset_suite_defaults(tmp_path):
    assert main(["simulate", "geneset-suite", "--out", str(tmp_path)]) == 0
    meta = json.loads((tmp_path / "geneset.json").read_text())
    gmt_lines = (tmp_path / "gene_sets.gmt").read_text().splitlines()
    bg = read_csv(tmp_path / "geneset_background.csv")
    assert len(bg) == 500 and len(gmt_lines) == 10
    assert all(len(line.split("\t")) == 27 for line in gmt_lines)
    assert meta["truth"] == "alternative"


def test_fit_writes_artifacts(toy):
    out = toy["dir"] / "fit"
    assert main(["fit", *pair_args(toy), *FAST, "--out", str(out)]) == 0
    files = set(read_dir(out))
    assert {"fit_result.json", "loadings.csv", "background_scores.csv", "foreground_scores.csv",
            "elbo_trace.csv", "run_config.json"} <= files
    load = read_csv(out / "loadings.csv")
    assert len(load) == 6 and {"S1", "W1", "delta"} <= set(load[0])
    assert len(read_csv(out / "elbo_trace.csv")) == 60
    assert main(["fit", *pair_args(toy), *FAST, "--model", "cglvm", "--out", str(toy["dir"] / "g")]) == 0
    assert "mu_b" in read_csv(toy["dir"] / "g" / "loadings.csv")[0]


def test_fit_gene_selection(toy):
    out = toy["dir"] / "sel"
    assert main(["fit", *pair_args(toy), *FAST, "--genes", "3", "--out", str(out)]) == 0
    assert len(read_csv(out / "loadings.csv")) == 3


def test_exit_codes(toy, capsys):
    out = str(toy["dir"] / "x")
    assert main(["fit", "--fg", toy["fg"], "--out", out]) == 1
    assert main(["fit", "--bg", toy["bg"], "--fg", "nope.csv", "--out", out]) == 3
    assert main(["fit", *pair_args(toy), "--steps", "0", "--out", out]) == 1
    assert main(["bogus"]) == 1
    assert main(["fit", *pair_args(toy), "--steps", "200", "--lr", "1e6", "--final-samples", "5",
                 "--out", out]) == 2
    diag = json.loads((toy["dir"] / "x" / "abort.json").read_text())
    assert diag["command"] == "fit" and "step" in diag
    capsys.readouterr()


def test_gene_mismatch_message(toy, capsys):
    other = toy["dir"] / "other.csv"
    save_counts(CountMatrix(np.ones((6, 3), dtype=int), tuple(f"h{i}" for i in range(6)), ("a", "b", "c")), other)
    assert main(["fit", "--bg", toy["bg"], "--fg", str(other), "--out", str(toy["dir"] / "m")]) == 3
    assert "g0" in capsys.readouterr().err


def test_config_precedence(toy, monkeypatch):
    cfg = toy["dir"] / "run.toml"
    cfg.write_text('steps = 40\nseed = 5\nfinal_samples = 5\n[fit]\nsteps = 30\nk1 = 1\nk2 = 1\n', encoding="utf-8")
    out = toy["dir"] / "p1"
    assert main(["fit", "--bg", toy["bg"], "--fg", toy["fg"], "--config", str(cfg), "--out", str(out)]) == 0
    resolved = json.loads((out / "run_config.json").read_text())["config"]
    assert (resolved["steps"], resolved["seed"], resolved["k1"]) == (30, 5, 1)
    out2 = toy["dir"] / "p2"
    assert main(["fit", "--bg", toy["bg"], "--fg", toy["fg"], "--config", str(cfg), "--steps", "20",
                 "--out", str(out2)]) == 0
    assert json.loads((out2 / "run_config.json").read_text())["config"]["steps"] == 20
    monkeypatch.setenv("CPLVM_SEED", "9")
    out3 = toy["dir"] / "p3"
    assert main(["simulate", "copula", "--n", "5", "--m", "5", "--out", str(out3)]) == 0
    assert json.loads((out3 / "run_config.json").read_text())["config"]["seed"] == 9
    assert main(["simulate", "copula", "--seed", "2", "--n", "5", "--m", "5", "--out", str(out3)]) == 0
    assert json.loads((out3 / "run_config.json").read_text())["config"]["seed"] == 2


def test_global_row_accounting_and_percentile(toy):
    base = ["test", "global", *pair_args(toy), *FAST, "--shuffles", "3"]
    a, b = toy["dir"] / "t1", toy["dir"] / "t2"
    assert main([*base, "--percentile", "95", "--out", str(a)]) == 0
    assert main([*base, "--percentile", "10", "--out", str(b)]) == 0
    ra, rb = read_csv(a / "ebf.csv"), read_csv(b / "ebf.csv")
    assert [r["kind"] for r in ra] == ["observed", "shuffled", "shuffled", "shuffled"]
    for x, y in zip(ra, rb):
        assert {k: v for k, v in x.items() if k != "decision"} == {k: v for k, v in y.items() if k != "decision"}
    report = json.loads((a / "ebf.json").read_text())
    assert report["null_summary"]["n"] == 3
    null = sorted(float(r["ebf"]) for r in ra[1:])
    assert report["tau"] == pytest.approx(float(np.percentile(null, 95)))


def test_geneset_all_and_single(toy):
    out = toy["dir"] / "gs"
    assert main(["test", "geneset", *pair_args(toy), *FAST, "--gmt", toy["gmt"], "--all", "--out", str(out)]) == 0
    rows = read_csv(out / "ebf.csv")
    assert [r["label"] for r in rows] == ["A", "B", "C"]
    report = json.loads((out / "ebf.json").read_text())
    assert report["unmatched_genes"]["B"] == 1
    one = toy["dir"] / "gs1"
    assert main(["test", "geneset", *pair_args(toy), *FAST, "--gmt", toy["gmt"], "--set", "C",
                 "--shuffles", "2", "--out", str(one)]) == 0
    assert [r["kind"] for r in read_csv(one / "ebf.csv")] == ["observed", "shuffled", "shuffled"]
    assert main(["test", "geneset", *pair_args(toy), *FAST, "--gmt", toy["gmt"], "--out", str(one)]) == 1
    assert main(["test", "geneset", *pair_args(toy), *FAST, "--gmt", toy["gmt"], "--set", "Z",
                 "--out", str(one)]) == 3


def test_benchmark_roc_files(tmp_path):
    out = tmp_path / "roc"
    args = ["benchmark", "roc", "--p", "4,5", "--datasets", "2", "--n", "15", "--m", "15", *FAST, "--out", str(out)]
    assert main(args) == 0
    for p in (4, 5):
        lines = (out / f"roc_p{p}.csv").read_text().splitlines()
        assert lines[0] == "method,tau,tpr,fpr"
        assert lines[-2].startswith("auc,cplvm,") and lines[-1].startswith("auc,cai,")
    summary = json.loads((out / "summary.json").read_text())
    assert set(summary) == {"p4", "p5"}


def test_benchmark_dimsweep_contains_true_k(tmp_path):
    out = tmp_path / "dim"
    assert main(["benchmark", "dimsweep", "--true-k", "2", "--k-values", "1,2", "--p", "6", "--n", "15",
                 "--m", "15", "--repeats", "1", *FAST, "--out", str(out)]) == 0
    assert [r["k"] for r in read_csv(out / "dimsweep.csv")] == ["1", "2"]
