import json
import os
import pathlib
import subprocess

import pytest

import cotrain

FIXTURES = pathlib.Path(__file__).resolve().parent.parent / "fixtures"


def load(name):
    return json.loads((FIXTURES / name).read_text())


def test_iou_and_ap():
    assert cotrain.iou([0, 0, 10, 10], [0, 0, 10, 10]) == 1.0
    assert cotrain.iou([0, 0, 10, 10], [20, 20, 30, 30]) == 0.0
    assert cotrain.average_precision([True, False, True], 2) == pytest.approx(28 / 33, abs=1e-12)
    assert cotrain.average_precision([], 3) == 0.0


def test_evaluate_matches_golden_report():
    report = cotrain.evaluate(load("eval_dets.json"), load("eval_gt.json"))
    golden = load("eval_report.json")
    assert report["map"] == pytest.approx(golden["map"], abs=1e-12)
    assert report["categories"] == golden["categories"]


def test_fuse_and_top_m():
    old = {"a": [{"category": "vehicle", "bbox": [0, 0, 10, 10], "confidence": 0.9}]}
    new = {
        "a": [{"category": "vehicle", "bbox": [1, 1, 11, 11], "confidence": 0.95}],
        "b": [{"category": "pedestrian", "bbox": [0, 0, 5, 20], "confidence": 0.85}],
    }
    fused = cotrain.fuse(old, new)
    assert set(fused) == {"a", "b"}
    assert fused["a"][0]["bbox"] == [1, 1, 11, 11]
    assert cotrain.fuse(old, {}) == old
    assert list(cotrain.select_top_m(new, 1)) == ["a"]


def test_should_stop():
    assert cotrain.should_stop(50.0, 30) == (True, 0, 50.0)
    stop, counter, prev = cotrain.should_stop(51.0, 25, counter=4, previous=50.0)
    assert (stop, counter, prev) == (True, 5, 51.0)


def test_audit_and_errors():
    result = cotrain.audit(load("audit_dpl.json"), load("eval_gt.json"), labeled_boxes=12)
    assert result["false_positives"] == 3
    assert result["fp_percent"] == pytest.approx(15.0)
    with pytest.raises(cotrain.ValidationError):
        cotrain.audit({"zz": [{"category": "vehicle", "bbox": [0, 0, 1, 1], "confidence": 0.9}]}, {})
    with pytest.raises(cotrain.ParseError):
        cotrain.evaluate({"a": [{"category": "vehicle", "bbox": [0, 0], "confidence": 0.9}]}, {})


def test_simulated_cell_and_curve(tmp_path):
    world = {"num_images": 60, "num_test_images": 40}
    out = cotrain.run_sim_cell(1, labeled_percent=10, world=world, out_dir=tmp_path / "cell")
    assert out["lb_map"] <= out["ub_map"]
    assert 20 <= out["cycles"] <= 30
    again = cotrain.run_sim_cell(1, labeled_percent=10, world=world, baselines=False)
    assert again["final_map"] == out["final_map"]
    curve, warnings = cotrain.cycle_curve(tmp_path / "cell")
    assert warnings == []
    assert [k for k, _ in curve] == list(range(out["cycles"] + 1))
    assert curve[0][1]["map"] == pytest.approx(out["lb_map"])


@pytest.mark.skipif(not os.environ.get("COTRAIN_CLI"), reason="command-line tool not built")
def test_cli_exit_codes(tmp_path):
    cli = os.environ["COTRAIN_CLI"]
    assert subprocess.run([cli], capture_output=True).returncode == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    args = [cli, "eval", "--gt", str(FIXTURES / "eval_gt.json"), "--dets", str(bad)]
    assert subprocess.run(args, capture_output=True).returncode == 3
