"""Evaluation: recall at rank n under an IoU threshold, and mean top-1 IoU.
Values are percentages."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

from .losses import temporal_iou

DEFAULT_THRESHOLDS = (0.3, 0.5, 0.7)


def recall_at_n(ranked_spans_per_sample, gt_spans, n: int = 1,
                iou_threshold: float = 0.5) -> float:
    """Percentage of samples whose top-n spans contain one with IoU >= the
    threshold; a sample with no predictions counts as a miss."""
    if len(ranked_spans_per_sample) != len(gt_spans):
        raise ValueError("one prediction list per ground truth required")
    if not gt_spans:
        raise ValueError("empty evaluation set")
    hits = 0
    for ranked, gt in zip(ranked_spans_per_sample, gt_spans):
        hits += any(temporal_iou(span, gt) >= iou_threshold for span in ranked[:n])
    return 100.0 * hits / len(gt_spans)


def mean_iou(top1_spans, gt_spans) -> float:
    """100 x mean IoU of the top-1 span per sample; missing -> IoU 0."""
    if len(top1_spans) != len(gt_spans):
        raise ValueError("one span per ground truth required")
    if not gt_spans:
        raise ValueError("empty evaluation set")
    total = sum(temporal_iou(span, gt) if span is not None else 0.0
                for span, gt in zip(top1_spans, gt_spans))
    return 100.0 * total / len(gt_spans)


@dataclass
class EvalReport:
    recalls: dict = field(default_factory=dict)   # iou threshold -> percent
    miou: float = 0.0
    n_samples: int = 0

    def to_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "miou": self.miou,
            **{f"r1_iou_{mu:g}": val for mu, val in sorted(self.recalls.items())},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        d = self.to_dict()
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(d.keys())
        writer.writerow(d.values())
        return buf.getvalue()

    def table(self, label: str = "") -> str:
        cols = [f"R@1 IoU={mu:g}" for mu in sorted(self.recalls)] + ["mIoU"]
        vals = [f"{self.recalls[mu]:.2f}" for mu in sorted(self.recalls)]
        vals.append(f"{self.miou:.2f}")
        width = max(len(c) for c in cols) + 2
        head = "".join(c.rjust(width) for c in cols)
        body = "".join(v.rjust(width) for v in vals)
        prefix = f"{label}\n" if label else ""
        return f"{prefix}{head}\n{body}"


def evaluate(ranked_spans_per_sample, gt_spans, n: int = 1,
             thresholds=DEFAULT_THRESHOLDS) -> EvalReport:
    recalls = {mu: recall_at_n(ranked_spans_per_sample, gt_spans, n, mu)
               for mu in thresholds}
    top1 = [ranked[0] if ranked else None for ranked in ranked_spans_per_sample]
    return EvalReport(recalls=recalls, miou=mean_iou(top1, gt_spans),
                      n_samples=len(gt_spans))
