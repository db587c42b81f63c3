import json
import re

import pytest

from chiralmp.cli import main
from chiralmp.ordering import is_cyclic_shift


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def parse_orders(text):
    orders = {}
    for line in text.splitlines():
        m = re.match(r"(\S+): \[(.*)\] angles=", line)
        if m:
            orders[m.group(1)] = [s for s in m.group(2).split(", ") if s]
    return orders


def test_convert_methane(capsys, data_dir, tmp_path):
    code, _, _ = run(capsys, "convert", data_dir / "methane.sdf", "--out", tmp_path)
    assert code == 0
    lines = (tmp_path / "edge_graphs.jsonl").read_text().splitlines()
    assert len(lines) == 1
    assert len(json.loads(lines[0])["nodes"]) == 8
    cfg = json.loads((tmp_path / "config.json").read_text())
    assert cfg["command"] == "convert" and cfg["seed"] == 0


def test_convert_empty_file(capsys, tmp_path):
    (tmp_path / "empty.sdf").write_text("")
    code, _, err = run(capsys, "convert", tmp_path / "empty.sdf")
    assert code == 2 and "empty" in err


def test_convert_reports_bad_records(capsys, data_dir):
    code, out, err = run(capsys, "convert", data_dir / "mixed.sdf")
    assert code == 1
    assert len(out.splitlines()) == 2
    assert "record 1: line 25: bond index out of range" in err


def test_order_mirror_reverses(capsys, data_dir):
    _, plain, _ = run(capsys, "order", data_dir / "chiral.sdf")
    code, mirrored, _ = run(capsys, "order", data_dir / "chiral.sdf", "--mirror")
    assert code == 0
    a, b = parse_orders(plain), parse_orders(mirrored)
    assert a.keys() == b.keys()
    assert len(a["0->1"]) == 3
    for node in a:
        assert is_cyclic_shift(b[node], a[node][::-1])
    assert not is_cyclic_shift(b["0->1"], a["0->1"])


def test_order_short_chain(capsys, data_dir):
    code, out, _ = run(capsys, "order", data_dir / "bent.sdf")
    assert code == 0
    orders = parse_orders(out)
    assert len(orders) == 4 and all(len(v) <= 1 for v in orders.values())
    assert orders["0->1"] == []


def test_order_parallel_neighbor(capsys, data_dir):
    code, _, err = run(capsys, "order", data_dir / "linear.sdf")
    assert code == 3 and "at node 1->0" in err
    code, out, _ = run(capsys, "order", data_dir / "linear.sdf", "--permissive-ordering")
    assert code == 0 and "angles=[nan]" in out


def test_unknown_flag_rejected(capsys):
    with pytest.raises(SystemExit) as info:
        main(["verify", "--bogus"])
    assert info.value.code == 2


def test_generate_is_deterministic(capsys, tmp_path):
    run(capsys, "generate", "--count", 6, "--seed", 3, "--out", tmp_path / "a")
    run(capsys, "generate", "--count", 6, "--seed", 3, "--out", tmp_path / "b")
    a = (tmp_path / "a" / "dataset.jsonl").read_bytes()
    assert a == (tmp_path / "b" / "dataset.jsonl").read_bytes()
    assert len(a.splitlines()) == 6
    run(capsys, "generate", "--task", "ranking", "--count", 3, "--out", tmp_path / "r")
    rows = [json.loads(l) for l in (tmp_path / "r" / "dataset.jsonl").read_text().splitlines()]
    assert len(rows) == 6 and rows[0]["meta"]["task"] == "ranking"


def test_train_then_eval(capsys, tmp_path):
    run(capsys, "generate", "--count", 40, "--seed", 1, "--out", tmp_path / "d")
    data = tmp_path / "d" / "dataset.jsonl"
    code, out, _ = run(
        capsys, "train", data, "--k", 2, "--hidden", 6, "--layers", 2, "--epochs", 3, "--batch-size", 8,
        "--out", tmp_path / "t",
    )
    assert code == 0
    final = json.loads((tmp_path / "t" / "final_metrics.json").read_text())
    records = (tmp_path / "t" / "metrics.jsonl").read_text().splitlines()
    assert len(records) == 3
    assert json.loads((tmp_path / "t" / "config.json").read_text())["k"] == 2
    for split in ("train", "test"):
        code, out, _ = run(capsys, "eval", tmp_path / "t" / "checkpoint.json", data, "--split", split)
        assert code == 0
        got = json.loads(out)
        assert got.pop("split") == split
        assert got == final[split]


def test_eval_rejects_other_schema(capsys, tmp_path):
    run(capsys, "generate", "--count", 10, "--out", tmp_path / "d")
    run(capsys, "train", tmp_path / "d" / "dataset.jsonl", "--hidden", 4, "--layers", 1, "--epochs", 2,
        "--out", tmp_path / "t")
    ckpt = json.loads((tmp_path / "t" / "checkpoint.json").read_text())
    ckpt["schema_version"] = 2
    (tmp_path / "bad.json").write_text(json.dumps(ckpt))
    code, _, err = run(capsys, "eval", tmp_path / "bad.json", tmp_path / "d" / "dataset.jsonl")
    assert code == 4 and "schema version" in err


def test_verify_subset(capsys, tmp_path):
    code, out, _ = run(capsys, "verify", "--trials", 3, "--only", "ordering", "--out", tmp_path)
    assert code == 0
    lines = out.splitlines()
    assert all(l.startswith("PASS ordering.") for l in lines[:-1])
    assert lines[-1].endswith("properties passed")
    assert (tmp_path / "verify_report.txt").read_text() == out
