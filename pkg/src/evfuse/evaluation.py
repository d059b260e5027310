"""Precision / success metrics and dataset-level reports.

Frames whose ground truth is absent (``None``) are excluded from every
metric. A missing prediction on a frame with ground truth counts as a miss.
Success uses the strict test ``IoU > u``.
"""
from __future__ import annotations

import json
import logging
import math
import os
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .boxes import BBox, iou_matrix
from .io import atomic_write_text, read_box_file

logger = logging.getLogger(__name__)

Trajectory = Sequence[Optional[BBox]]

PRECISION_THRESHOLDS = np.arange(51, dtype=np.float64)
SUCCESS_THRESHOLDS = np.arange(21) / 20


def iou(a: BBox, b: BBox) -> float:
    return float(iou_matrix(a, b)[0, 0])


def center_error(a: BBox, b: BBox) -> float:
    (ax, ay), (bx, by) = a.center, b.center
    return math.hypot(ax - bx, ay - by)


def _paired(pred: Trajectory, gt: Trajectory):
    if len(pred) != len(gt):
        raise ValueError(f"trajectory length mismatch: {len(pred)} predictions vs {len(gt)} ground truth")
    pairs = [(p, g) for p, g in zip(pred, gt) if g is not None]
    if not pairs:
        raise ValueError("no frames with ground truth to evaluate")
    return pairs


def center_errors(pred: Trajectory, gt: Trajectory) -> np.ndarray:
    return np.array([math.inf if p is None else center_error(p, g) for p, g in _paired(pred, gt)])


def overlaps(pred: Trajectory, gt: Trajectory) -> np.ndarray:
    return np.array([0.0 if p is None else iou(p, g) for p, g in _paired(pred, gt)])


def precision_curve(pred: Trajectory, gt: Trajectory, thresholds=PRECISION_THRESHOLDS):
    """Fraction of frames with centre error <= each threshold; also P@20."""
    err = center_errors(pred, gt)
    thresholds = np.asarray(thresholds, dtype=np.float64)
    curve = (err[None, :] <= thresholds[:, None]).mean(axis=1)
    p20 = float((err <= 20).mean())
    return curve, p20


def success_curve(pred: Trajectory, gt: Trajectory, thresholds=SUCCESS_THRESHOLDS):
    """Fraction of frames with IoU > each threshold; AUC is the curve mean."""
    ov = overlaps(pred, gt)
    thresholds = np.asarray(thresholds, dtype=np.float64)
    curve = (ov[None, :] > thresholds[:, None]).mean(axis=1)
    return curve, float(curve.mean())


def evaluate_sequence(pred: Trajectory, gt: Trajectory) -> dict:
    pc, p20 = precision_curve(pred, gt)
    sc, auc = success_curve(pred, gt)
    return {"p20": p20, "auc": auc, "frames": int(sum(g is not None for g in gt)),
            "precision_curve": pc.tolist(), "success_curve": sc.tolist()}


def _mean_curves(entries):
    return (np.mean([e["precision_curve"] for e in entries], axis=0).tolist(),
            np.mean([e["success_curve"] for e in entries], axis=0).tolist())


def evaluate_dataset(results_dir, annotations_dir, attribute_tags: dict | None = None) -> dict:
    """Score every annotated sequence against ``<results_dir>/<name>.txt``.

    Aggregates are unweighted means over sequences; per-attribute
    aggregates average the sequences carrying that tag. Missing or
    malformed sequences are listed under ``errors`` and skipped.

    ``attribute_tags`` maps sequence name to a list of tags; when omitted,
    ``<annotations_dir>/attributes.json`` is used if present.
    """
    results_dir, annotations_dir = Path(results_dir), Path(annotations_dir)
    if attribute_tags is None:
        attr_file = annotations_dir / "attributes.json"
        attribute_tags = json.loads(attr_file.read_text()) if attr_file.exists() else {}

    names = sorted(p.stem for p in annotations_dir.glob("*.txt"))
    sequences, errors = {}, []
    for name in names:
        res_path = results_dir / f"{name}.txt"
        if not res_path.exists():
            errors.append({"sequence": name, "error": f"missing results file {res_path.name}"})
            continue
        try:
            gt, _ = read_box_file(annotations_dir / f"{name}.txt")
            pred, _ = read_box_file(res_path)
            sequences[name] = evaluate_sequence(pred, gt)
        except (ValueError, OSError) as exc:
            errors.append({"sequence": name, "error": str(exc)})
    for name in sorted(attribute_tags):
        if name not in names:
            logger.info("attribute tags given for unknown sequence %s", name)

    def summary(members):
        entries = [sequences[m] for m in members]
        pc, sc = _mean_curves(entries)
        return {"p20": float(np.mean([e["p20"] for e in entries])),
                "auc": float(np.mean([e["auc"] for e in entries])),
                "precision_curve": pc, "success_curve": sc}

    report = {"aggregate": summary(sorted(sequences)) if sequences else {"p20": None, "auc": None},
              "sequences": sequences, "attributes": {}, "errors": errors}
    tags = sorted({t for name in sequences for t in attribute_tags.get(name, [])})
    for tag in tags:
        members = sorted(n for n in sequences if tag in attribute_tags.get(n, []))
        report["attributes"][tag] = dict(summary(members), sequences=members)
    return report


def _curve_csv(thresholds, values) -> str:
    lines = ["threshold,value"]
    lines += [f"{t:g},{v:.6f}" for t, v in zip(thresholds, values)]
    return "\n".join(lines) + "\n"


def write_report(report: dict, path) -> Path:
    """Write the JSON report plus ``<stem>_curves/*.csv``; returns the curve dir."""
    path = Path(path)
    curves_dir = path.with_name(path.stem + "_curves")
    os.makedirs(curves_dir, exist_ok=True)
    groups = {"aggregate": report["aggregate"]}
    groups.update({f"seq_{k}": v for k, v in report["sequences"].items()})
    groups.update({f"attr_{k}": v for k, v in report["attributes"].items()})
    for key, entry in groups.items():
        if entry.get("precision_curve") is None:
            continue
        atomic_write_text(curves_dir / f"{key}_precision.csv",
                          _curve_csv(PRECISION_THRESHOLDS, entry["precision_curve"]))
        atomic_write_text(curves_dir / f"{key}_success.csv",
                          _curve_csv(SUCCESS_THRESHOLDS, entry["success_curve"]))
    atomic_write_text(path, json.dumps(report, indent=2, sort_keys=True) + "\n")
    return curves_dir
