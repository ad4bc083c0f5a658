"""Disagreement-based co-training of 2D box detectors.

Detections, labels and pseudo-label sets are plain dicts in the same layout as
the JSON files the command-line tool reads and writes.
"""

import json

from . import _cotrain
from ._cotrain import BackendError, CheckpointError, ParseError, ValidationError, average_precision, iou

__all__ = [
    "BackendError",
    "CheckpointError",
    "ParseError",
    "ValidationError",
    "audit",
    "average_precision",
    "cycle_curve",
    "evaluate",
    "fuse",
    "iou",
    "run_sim_cell",
    "select_top_m",
    "should_stop",
]


def evaluate(dets, gt, min_height=25.0, recall_points=11):
    """mAP report ({"map", "categories"}) of detections against ground truth."""
    return json.loads(_cotrain.evaluate(json.dumps(dets), json.dumps(gt), min_height, recall_points))


def fuse(old, fresh):
    """Union of image ids; on the intersection the fresh labels win."""
    return json.loads(_cotrain.fuse(json.dumps(old), json.dumps(fresh)))["entries"]


def select_top_m(dets, m=None):
    """The m images with the most confident detections (all when m is None)."""
    return json.loads(_cotrain.select_top_m(json.dumps(dets), m))["entries"]


def should_stop(metric, k, counter=0, previous=None, k_min=20, k_max=30, delta_k=5, t_delta_map=2.0):
    """Stability rule; returns (stop, counter, previous_metric)."""
    return _cotrain.should_stop(k_min, k_max, delta_k, t_delta_map, metric, k, counter, previous)


def audit(dpl, gt, labeled_boxes=0):
    """False-positive count, FP% and the FP / BB / FP+BB corrected sets."""
    out = json.loads(_cotrain.audit(json.dumps(dpl), json.dumps(gt), labeled_boxes))
    for key in ("fp_corrected", "bb_corrected", "fpbb_corrected"):
        out[key] = out[key]["entries"]
    return out


def run_sim_cell(seed, labeled_percent=5.0, mode="rgb_d", world=None, params=None, out_dir=None, baselines=True):
    """Co-trains on a simulated world; returns LB / final / UB mAP and the cycle count."""
    return json.loads(
        _cotrain.run_sim_cell(
            seed, labeled_percent, mode, json.dumps(world or {}), json.dumps(params or {}),
            None if out_dir is None else str(out_dir), baselines,
        )
    )


def cycle_curve(cell_dir):
    """[(k, report)] for a simulated cell directory, plus warnings; k = 0 is the lower bound."""
    points, warnings = _cotrain.cycle_curve(str(cell_dir))
    return [(p["k"], p["report"]) for p in json.loads(points)], warnings
