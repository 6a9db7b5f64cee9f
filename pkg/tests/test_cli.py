import json

import numpy as np
import pytest

from rshscp.cli import load_truth, main, save_truth
from rshscp.io import load_dataset, load_model_file
from rshscp.simulation import SimSpec, generate


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("HSCP_THREADS", raising=False)
    (tmp_path / "sim.json").write_text(json.dumps(
        {"p": 10, "widths": [3], "subjects_per_site": [6, 6], "seed": 1}))
    (tmp_path / "cfg.json").write_text(json.dumps(
        {"method": "rshscp", "widths": [3], "tau": 3, "iterations": 30, "adv_start_iter": 10,
         "gamma": 1.0, "site_warmup_iters": 5, "min_adv_iters": 5}))
    return tmp_path


def _simulate(workdir):
    assert main(["simulate", "--config", "sim.json", "--out", "d.bin", "--truth", "t.npz"]) == 0


def test_simulate_then_fit(workdir, capsys):
    _simulate(workdir)
    assert load_dataset("d.bin").n_subjects == 12
    rc = main(["fit", "--data", "d.bin", "--config", "cfg.json", "--method", "adv_rshscp",
               "--out", "m.bin", "--report", "r.json", "--trace", "tr.csv", "--progress", "10"])
    assert rc == 0
    out, err = capsys.readouterr()
    assert "iter 10" in err
    summary = json.loads(out.strip().splitlines()[-1])
    assert summary["method"] == "adv_rshscp"
    report = json.loads((workdir / "r.json").read_text())
    assert report["adv_start"] is not None
    mf = load_model_file("m.bin")
    assert mf.model.W_tilde is not None and mf.model.has_site_terms
    assert (workdir / "tr.csv").read_text().startswith("iteration,phase,objective")


def test_eval_accuracy_and_site_cv(workdir, capsys):
    _simulate(workdir)
    main(["fit", "--data", "d.bin", "--config", "cfg.json", "--method", "rshscp", "--out", "m.bin"])
    capsys.readouterr()
    rc = main(["eval", "--data", "d.bin", "--model", "m.bin", "--truth", "t.npz",
               "--metrics", "accuracy,site_cv", "--out", "e.csv"])
    assert rc == 0
    lines = (workdir / "e.csv").read_text().splitlines()
    assert lines[0] == "metric,level,value"
    assert lines[1].startswith("accuracy,1,")
    assert lines[2].startswith("site_cv_logistic,,")


def test_eval_reproducibility(workdir):
    _simulate(workdir)
    rc = main(["eval", "--data", "d.bin", "--config", "cfg.json", "--metrics", "reproducibility",
               "--out", "e.csv"])
    assert rc == 0
    assert "split_sample_mean" in (workdir / "e.csv").read_text()


def test_grid(workdir):
    _simulate(workdir)
    (workdir / "grid.json").write_text(json.dumps({"mu": [0.5, 1.0]}))
    rc = main(["grid", "--data", "d.bin", "--config", "cfg.json", "--grid", "grid.json",
               "--repeats", "1", "--out", "g.csv"])
    assert rc == 0
    assert len((workdir / "g.csv").read_text().splitlines()) == 3


def test_report_table_layout(workdir):
    rc = main(["report", "--tables", "table1,convergence", "--seeds", "0", "--k", "4",
               "--methods", "hscp,adv_rshscp", "--iters", "12", "--sites", "5,5",
               "--out-dir", "rep"])
    assert rc == 0
    table = (workdir / "rep" / "table1.csv").read_text().splitlines()
    assert table[0] == "method,k=4,k=4_sd"
    assert [row.split(",")[0] for row in table[1:]] == ["hSCP", "Adv. rshSCP"]
    assert "| Method | k=4 |" in (workdir / "rep" / "table1.md").read_text()
    conv = (workdir / "rep" / "convergence.dat").read_text().splitlines()
    assert conv[1].startswith("# iteration")
    assert (workdir / "rep" / "convergence.csv").exists()


def test_exit_codes(workdir, capsys):
    assert main(["fit", "--bogus"]) == 2
    assert "usage" in capsys.readouterr().err
    assert main(["nonsense"]) == 2
    assert main(["fit", "--data", "missing.bin", "--config", "cfg.json", "--out", "m.bin"]) == 2
    (workdir / "bad.json").write_text('{"method": "hscp", "widths": [3], "learning": 1}')
    _simulate(workdir)
    assert main(["fit", "--data", "d.bin", "--config", "bad.json", "--out", "m.bin"]) == 2
    (workdir / "div.json").write_text(json.dumps(
        {"method": "hscp", "widths": [3], "iterations": 20, "adv_start_iter": 5,
         "lr_w": 1e200, "lr_lambda": 1e200}))
    with np.errstate(all="ignore"):
        assert main(["fit", "--data", "d.bin", "--config", "div.json", "--out", "m.bin"]) == 3
    assert "numerical failure" in capsys.readouterr().err


def test_threads_env(workdir, monkeypatch):
    _simulate(workdir)
    monkeypatch.setenv("HSCP_THREADS", "2")
    assert main(["fit", "--data", "d.bin", "--config", "cfg.json", "--out", "m.bin"]) == 0
    monkeypatch.setenv("HSCP_THREADS", "x")
    assert main(["fit", "--data", "d.bin", "--config", "cfg.json", "--out", "m.bin"]) == 2


def test_truth_round_trip(tmp_path):
    _, truth = generate(SimSpec(p=8, widths=(4, 2), subjects_per_site=(3,), seed=0))
    save_truth(truth, tmp_path / "t.npz")
    back = load_truth(tmp_path / "t.npz")
    assert all(np.array_equal(a, b) for a, b in zip(truth.W, back.W))
    assert np.array_equal(truth.V, back.V)
