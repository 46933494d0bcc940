"""Overlap and volume metrics for label maps (Dice, IoU, relative volume difference).

All values are percentages.  Label 0 is background and never scored.
"""
import json
from dataclasses import dataclass, field

import numpy as np

from .validation import check_label_volume, check_same_dims


@dataclass
class ClassScore:
    dsc: float
    iou: float
    rvd: float          # nan when the class is absent from the ground truth
    pred_voxels: int
    gt_voxels: int

    @property
    def rvd_defined(self):
        return self.gt_voxels > 0


@dataclass
class MetricReport:
    per_class: dict = field(default_factory=dict)
    macro_dsc: float = float("nan")
    miou: float = float("nan")
    mean_rvd: float = float("nan")

    def to_dict(self):
        def num(v):
            return None if v != v else float(v)

        return {
            "macro_dsc": num(self.macro_dsc),
            "miou": num(self.miou),
            "mean_rvd": num(self.mean_rvd),
            "classes": {
                str(c): {
                    "dsc": num(s.dsc),
                    "iou": num(s.iou),
                    "rvd": num(s.rvd),
                    "rvd_defined": s.rvd_defined,
                    "pred_voxels": s.pred_voxels,
                    "gt_voxels": s.gt_voxels,
                }
                for c, s in sorted(self.per_class.items())
            },
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2) + "\n"


def class_score(pred_c, gt_c):
    """Scores for one class from boolean masks."""
    p, g = int(pred_c.sum()), int(gt_c.sum())
    inter = int(np.logical_and(pred_c, gt_c).sum())
    union = p + g - inter
    dsc = 200.0 * inter / (p + g) if p + g else 100.0
    iou = 100.0 * inter / union if union else 100.0
    rvd = 100.0 * abs(p - g) / g if g else float("nan")
    return ClassScore(dsc, iou, rvd, p, g)


def evaluate(pred, gt, n_classes=None):
    """Per-class and macro scores; macro averages run over classes present in ``gt``."""
    check_same_dims(pred, gt, ("pred", "gt"))
    p = check_label_volume(pred, n_classes, "pred")
    g = check_label_volume(gt, n_classes, "gt")
    present = sorted(set(np.unique(p).tolist()) | set(np.unique(g).tolist()))
    report = MetricReport()
    for c in present:
        if c == 0:
            continue
        report.per_class[int(c)] = class_score(p == c, g == c)
    scored = [s for s in report.per_class.values() if s.gt_voxels > 0]
    if scored:
        report.macro_dsc = float(np.mean([s.dsc for s in scored]))
        report.miou = float(np.mean([s.iou for s in scored]))
        report.mean_rvd = float(np.mean([s.rvd for s in scored]))
    return report

