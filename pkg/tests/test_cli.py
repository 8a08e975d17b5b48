from __future__ import annotations

import hashlib
import json
from pathlib import Path

import pytest
import yaml
from click.testing import CliRunner

from nnfault.cli import main
from nnfault.store import open_store

SMALL = {
    "seed": 3,
    "model": {"zoo": "mlp", "options": {"d": 16, "hidden": [32], "n_classes": 4}},
    "dataset": {"kind": "blobs", "n": 200, "d": 16, "n_classes": 4, "spread": 0.3},
    "train": {"epochs": 10, "learning_rate": 0.1},
}


def write_cfg(tmp_path, name="cfg.yaml", **extra):
    cfg = {**SMALL, "out": str(tmp_path / "out"), "store": str(tmp_path / "s.db"), **extra}
    p = tmp_path / name
    p.write_text(yaml.safe_dump(cfg))
    return p


def invoke(*args):
    res = CliRunner().invoke(main, [str(a) for a in args])
    return res, (json.loads(res.output.strip().splitlines()[-1]) if res.exit_code == 0 else None)


def digest(d: Path) -> dict:
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(d.iterdir())}


def test_train_is_byte_identical(tmp_path):
    cfg = write_cfg(tmp_path)
    res, a = invoke("train", "--config", cfg, "--out", tmp_path / "a")
    assert res.exit_code == 0, res.output
    res, b = invoke("train", "--config", cfg, "--out", tmp_path / "b")
    assert a["baseline_accuracy"] == b["baseline_accuracy"] > 0.5
    assert digest(Path(a["model"])) == digest(Path(b["model"]))
    assert "manifest.json" in digest(Path(a["model"]))


def test_missing_section_exits_2_with_field(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump({"model": {"zoo": "mlp"}}))
    res = CliRunner().invoke(main, ["train", "--config", str(p)])
    assert res.exit_code == 2
    assert "dataset" in res.output


def test_bad_field_exits_2_with_dotted_path(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump({**SMALL, "train": {"epochs": 0}}))
    res = CliRunner().invoke(main, ["train", "--config", str(p)])
    assert res.exit_code == 2
    assert "train.epochs" in res.output


def test_unknown_key_rejected(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump({**SMALL, "bogus": 1}))
    assert CliRunner().invoke(main, ["train", "--config", str(p)]).exit_code == 2


def test_missing_model_path_exits_2(tmp_path):
    p = write_cfg(tmp_path, model={"path": str(tmp_path / "nope")})
    res = CliRunner().invoke(main, ["inject", "--config", str(p)])
    assert res.exit_code == 2


def test_empty_inject_matches_train_baseline(tmp_path):
    cfg = write_cfg(tmp_path)
    _, t = invoke("train", "--config", cfg)
    cfg2 = write_cfg(tmp_path, "i.yaml", model={"path": t["model"]})
    res, i = invoke("inject", "--config", cfg2)
    assert res.exit_code == 0, res.output
    assert i["accuracy"] == t["baseline_accuracy"]
    assert i["faults"] == 0


def test_single_sign_bit_fault_is_traced(tmp_path):
    cfg = write_cfg(tmp_path, injections=[
        {"layer": "fc1", "elements": [[0, 0]], "bits": [[31]]},
        {"monitor": "fc1", "target": "weight"},
    ])
    res, i = invoke("inject", "--config", cfg)
    assert res.exit_code == 0, res.output
    assert i["faults"] == 1
    with open_store(tmp_path / "s.db") as st:
        rows = st.fault_trace(i["experiment_id"])
        assert len(rows) == 1 and rows[0]["bit_position"] == 31 and rows[0]["element_index"] == 0
        assert st.count("monitors") == i["monitor_records"] > 0


def test_quantized_output_fault(tmp_path):
    cfg = write_cfg(tmp_path, injections=[
        {"layer": "fc1", "target": "output", "site": "quantized_int", "kind": "stuck_at_one",
         "elements": [[0], [1], [2]], "bits": [[30], [30], [30]]},
    ])
    res, i = invoke("inject", "--config", cfg)
    assert res.exit_code == 0, res.output
    assert i["faults"] == 3


def test_report_on_empty_store(tmp_path):
    with open_store(tmp_path / "s.db"):
        pass
    res, r = invoke("report", "--store", tmp_path / "s.db", "--out", tmp_path / "rep")
    assert res.exit_code == 0, res.output
    assert r["accuracy_rows"] == 0
    assert (tmp_path / "rep" / "accuracy_vs_rate.csv").read_bytes() == b"experiment_id,rate,min_accuracy\r\n"


def test_report_needs_existing_store(tmp_path):
    res = CliRunner().invoke(main, ["report", "--store", str(tmp_path / "none.db")])
    assert res.exit_code == 2
    assert not (tmp_path / "none.db").exists()


@pytest.fixture(scope="module")
def swept(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("sweep")
    cfg = write_cfg(tmp, sweep={"bits": [31], "seeds": [0], "control": True},
                    bench={"fault_counts": [10, 100], "repetitions": 2, "warmup": 0, "n_inputs": 500})
    res, s = invoke("sweep", "--config", cfg)
    assert res.exit_code == 0, res.output
    res, b = invoke("bench", "--config", cfg)
    assert res.exit_code == 0, res.output
    return tmp, s, b


def test_sweep_then_report(swept):
    tmp, s, _ = swept
    assert s["errors"] == 0
    assert s["cells"] == 65 * 2
    before = hashlib.sha256((tmp / "s.db").read_bytes()).hexdigest()
    res, r = invoke("report", "--store", tmp / "s.db", "--out", tmp / "rep")
    assert res.exit_code == 0, res.output
    assert r["accuracy_rows"] == 65
    assert r["overhead_rows"] == 3
    assert hashlib.sha256((tmp / "s.db").read_bytes()).hexdigest() == before
    lines = (tmp / "rep" / "accuracy_vs_rate.csv").read_text().splitlines()
    rates = [float(l.split(",")[1]) for l in lines[1:]]
    assert rates[0] == 0.0 and rates[-1] == 1.0


def test_bench_csv(swept):
    tmp, _, b = swept
    lines = (tmp / "out" / "bench.csv").read_bytes().split(b"\r\n")
    assert lines[0] == b"k,t_median_s,overhead"
    assert lines[1].startswith(b"0,") and lines[1].endswith(b",0.0")
    assert b["overhead"]["0"] == 0.0


def test_sweep_csv_export(swept):
    tmp, s, _ = swept
    text = (tmp / "out" / "metrics.csv").read_text()
    rows = text.splitlines()
    assert rows[0] == "experiment_id,rate,layer,seed,accuracy,fault_count,error"
    assert len(rows) == 1 + s["cells"]
