"""Evaluation reports: delimited tables, plain-text summaries, and figures.

The eval and match report paths write a CSV with one row per concept, a
text table for quick reading, and PNG figures (precision-recall curves
and per-concept bar charts) next to the delimited output.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .evaldata import GroundTruth
from .evalbench import average_precision, corloc
from .geometry import Region, iou

__all__ = [
    "precision_recall_points",
    "write_eval_report",
    "write_match_report",
]


def precision_recall_points(
    dets: dict[str, list[tuple[Region, float]]],
    gt: GroundTruth,
    concept: str,
    iou_thresh: float = 0.4,
) -> tuple[np.ndarray, np.ndarray]:
    """Raw PR curve points for plotting, same matching rule as AP."""
    live = {
        i: [b for b in gt.boxes(i, concept)]
        for i in gt.image_ids()
        if gt.boxes(i, concept)
    }
    n_positive = sum(1 for boxes in live.values() for b in boxes if not b.ignored)
    pooled = []
    for image_id in sorted(dets):
        for rank, (region, score) in enumerate(dets[image_id]):
            pooled.append((image_id, rank, region, float(score)))
    pooled.sort(key=lambda t: (-t[3], t[0], t[1]))
    matched: dict[str, set[int]] = {i: set() for i in live}
    tp, fp = [], []
    for image_id, _rank, region, _score in pooled:
        boxes = live.get(image_id, [])
        best_iou, best_idx = 0.0, -1
        for idx, b in enumerate(boxes):
            ov = iou(region, b.region)
            if ov > best_iou:
                best_iou, best_idx = ov, idx
        if best_idx >= 0 and best_iou >= iou_thresh:
            if boxes[best_idx].ignored:
                continue
            if best_idx in matched[image_id]:
                tp.append(0.0)
                fp.append(1.0)
            else:
                matched[image_id].add(best_idx)
                tp.append(1.0)
                fp.append(0.0)
        else:
            tp.append(0.0)
            fp.append(1.0)
    if not tp or n_positive == 0:
        return np.zeros(0), np.zeros(0)
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(fp)
    return tp_cum / n_positive, tp_cum / (tp_cum + fp_cum)


def _text_table(headers: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h) for i, h in enumerate(headers)]
    sep = "+" + "+".join("-" * (w + 2) for w in widths) + "+"
    def fmt(cells):
        return "| " + " | ".join(c.ljust(w) for c, w in zip(cells, widths)) + " |"
    lines = [sep, fmt(headers), sep]
    lines += [fmt(r) for r in rows]
    lines.append(sep)
    return "\n".join(lines)


def write_eval_report(
    out_dir: str | Path,
    dets: dict[str, dict[str, list[tuple[Region, float]]]],
    top1: dict[str, dict[str, Region]],
    gt: GroundTruth,
    concepts: list[str],
    iou_thresh: float = 0.4,
    label: str = "eval",
) -> dict[str, dict[str, float]]:
    """Per-concept AP and CorLoc: CSV + text table + figures.

    ``dets`` maps concept -> image -> ranked detections; ``top1`` maps
    concept -> positive image -> its single best box.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results: dict[str, dict[str, float]] = {}
    fig, ax = plt.subplots(figsize=(6, 4.5))
    for concept in concepts:
        ap = average_precision(dets[concept], gt, concept, iou_thresh)
        cl = corloc(top1[concept], gt, concept, iou_thresh)
        results[concept] = {"ap": ap, "corloc": cl}
        recall, precision = precision_recall_points(dets[concept], gt, concept, iou_thresh)
        if recall.size:
            ax.plot(recall, precision, label=f"{concept} (AP {ap:.2f})")
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    ax.legend(loc="lower left", fontsize=8)
    ax.set_title(f"{label}: precision-recall @ IoU {iou_thresh}")
    fig.tight_layout()
    fig.savefig(out_dir / f"{label}_pr_curves.png", dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 4))
    x = np.arange(len(concepts))
    ax.bar(x - 0.2, [results[c]["ap"] for c in concepts], width=0.4, label="AP")
    ax.bar(x + 0.2, [results[c]["corloc"] for c in concepts], width=0.4, label="CorLoc")
    ax.set_xticks(x, concepts, rotation=20, ha="right", fontsize=8)
    ax.set_ylim(0, 1.05)
    ax.legend()
    ax.set_title(f"{label}: per-concept metrics @ IoU {iou_thresh}")
    fig.tight_layout()
    fig.savefig(out_dir / f"{label}_metrics.png", dpi=120)
    plt.close(fig)

    with open(out_dir / f"{label}_report.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["concept", "ap", "corloc", "iou_thresh"])
        for c in concepts:
            writer.writerow([c, f"{results[c]['ap']:.6f}", f"{results[c]['corloc']:.6f}", iou_thresh])
        writer.writerow(
            [
                "MEAN",
                f"{np.mean([results[c]['ap'] for c in concepts]):.6f}",
                f"{np.mean([results[c]['corloc'] for c in concepts]):.6f}",
                iou_thresh,
            ]
        )

    rows = [[c, f"{results[c]['ap']:.3f}", f"{results[c]['corloc']:.3f}"] for c in concepts]
    rows.append(
        [
            "mean",
            f"{np.mean([results[c]['ap'] for c in concepts]):.3f}",
            f"{np.mean([results[c]['corloc'] for c in concepts]):.3f}",
        ]
    )
    (out_dir / f"{label}_summary.txt").write_text(
        _text_table(["concept", "AP", "CorLoc"], rows) + "\n"
    )
    return results


def write_match_report(
    out_dir: str | Path,
    per_variant: dict[str, dict[str, float]],
    skipped: dict[str, int],
    label: str = "match",
) -> None:
    """Mean match IoU per concept and variant: CSV + text + bar chart."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    variants = sorted(per_variant)
    concepts = sorted({c for v in per_variant.values() for c in v})

    with open(out_dir / f"{label}_report.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["concept"] + variants)
        for c in concepts:
            writer.writerow([c] + [f"{per_variant[v].get(c, float('nan')):.6f}" for v in variants])
        writer.writerow(["skipped"] + [str(skipped.get(v, 0)) for v in variants])

    rows = [
        [c] + [f"{per_variant[v].get(c, float('nan')):.3f}" for v in variants]
        for c in concepts
    ]
    (out_dir / f"{label}_summary.txt").write_text(
        _text_table(["concept"] + variants, rows) + "\n"
    )

    fig, ax = plt.subplots(figsize=(6, 4))
    x = np.arange(len(concepts))
    width = 0.8 / max(len(variants), 1)
    for i, v in enumerate(variants):
        ax.bar(
            x + (i - (len(variants) - 1) / 2) * width,
            [per_variant[v].get(c, 0.0) for c in concepts],
            width=width,
            label=v,
        )
    ax.set_xticks(x, concepts, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("mean match IoU")
    ax.set_ylim(0, 1.05)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_dir / f"{label}_mean_iou.png", dpi=120)
    plt.close(fig)
