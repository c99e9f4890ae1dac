"""Detection metrics, the semantic-matching benchmark, and the grid encoder.

Average precision follows the all-point-interpolation convention with
greedy score-ordered matching; a detection is a true positive when its
hard IoU with an unmatched same-concept ground-truth box reaches the
threshold (0.4 by default here, as parts are small), duplicates on an
already-matched box count as false positives, and boxes flagged difficult
or truncated are ignored entirely.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .anchors import AnchorBank, AnchorDetections
from .embeddings import (
    DescriptorStore,
    EmbeddingConfig,
    geometric_embed_many,
)
from .errors import ConfigError, DataError
from .evaldata import GroundTruth, GTBox
from .geometry import OverlapConfig, Region, iou, rho_pairs

__all__ = [
    "GTBox",
    "GroundTruth",
    "average_precision",
    "corloc",
    "MATCH_VARIANTS",
    "match_regions",
    "MatchResult",
    "match_benchmark",
    "grid_encode",
    "grid_search_lambda",
]

_HARD = OverlapConfig(mode="hard")

MATCH_VARIANTS = ("anchor-ag", "anchor-g", "a")


def _ranked(dets: dict[str, list[tuple[Region, float]]]) -> list[tuple[str, Region, float]]:
    """All detections pooled, score-descending; ties keep per-image rank order."""
    pooled = []
    for image_id in sorted(dets):
        for rank, (region, score) in enumerate(dets[image_id]):
            pooled.append((image_id, rank, region, float(score)))
    pooled.sort(key=lambda t: (-t[3], t[0], t[1]))
    return [(i, r, s) for i, _, r, s in pooled]


def average_precision(
    dets: dict[str, list[tuple[Region, float]]],
    gt: GroundTruth,
    concept: str,
    iou_thresh: float = 0.4,
) -> float:
    """All-point interpolated AP for one concept over ranked detections."""
    gt.require_concept(concept)
    live: dict[str, list[GTBox]] = {}
    n_positive = 0
    for image_id in gt.image_ids():
        boxes = gt.boxes(image_id, concept)
        if boxes:
            live[image_id] = boxes
            n_positive += sum(1 for b in boxes if not b.ignored)
    if n_positive == 0:
        raise DataError(f"no evaluable ground truth for concept {concept!r}")

    matched: dict[str, set[int]] = {i: set() for i in live}
    tp: list[float] = []
    fp: list[float] = []
    for image_id, region, _score in _ranked(dets):
        boxes = live.get(image_id, [])
        best_iou, best_idx = 0.0, -1
        for idx, box in enumerate(boxes):
            ov = iou(region, box.region)
            if ov > best_iou:
                best_iou, best_idx = ov, idx
        if best_idx >= 0 and best_iou >= iou_thresh:
            box = boxes[best_idx]
            if box.ignored:
                continue  # neither TP nor FP
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
    if not tp:
        return 0.0
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(fp)
    recall = tp_cum / n_positive
    precision = tp_cum / (tp_cum + fp_cum)
    # all-point interpolation: running max of precision from the right
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def corloc(
    top1: dict[str, Region],
    gt: GroundTruth,
    concept: str,
    iou_thresh: float = 0.4,
) -> float:
    """Fraction of the given positive images whose top detection hits any
    same-concept ground truth at the threshold."""
    gt.require_concept(concept)
    if not top1:
        raise DataError("corloc is undefined without positive images")
    hits = 0
    for image_id, region in top1.items():
        boxes = gt.boxes(image_id, concept)
        if any(iou(region, b.region) >= iou_thresh for b in boxes if not b.ignored):
            hits += 1
    return hits / len(top1)


def _match_matrix(
    store: DescriptorStore,
    image_id: str,
    dets: dict[str, AnchorDetections] | None,
    variant: str,
    overlap: OverlapConfig,
) -> np.ndarray:
    record = store[image_id]
    if variant == "a":
        return record.descriptors
    if dets is None or image_id not in dets:
        raise ConfigError(f"variant {variant!r} needs anchor detections for {image_id!r}")
    geo = geometric_embed_many(record.proposal_boxes(), dets[image_id],
                               EmbeddingConfig(variant="B+G", overlap=overlap))
    if variant == "anchor-g":
        return geo
    if variant == "anchor-ag":
        n = record.n_proposals
        return (record.descriptors[:, :, None] * geo[:, None, :]).reshape(n, -1)
    raise ConfigError(f"match variant must be one of {MATCH_VARIANTS}, got {variant!r}")


def _normalize_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    safe = np.where(norms > 0.0, norms, 1.0)
    return m / safe


class _MatchMatrixCache:
    """Per-image embedding matrices for matching, computed once."""

    def __init__(
        self,
        store: DescriptorStore,
        dets: dict[str, AnchorDetections] | None,
        variant: str,
        overlap: OverlapConfig,
        normalize: bool,
    ):
        self.store = store
        self.dets = dets
        self.variant = variant
        self.overlap = overlap
        self.normalize = normalize
        self._cache: dict[str, np.ndarray] = {}

    def matrix(self, image_id: str) -> np.ndarray:
        if image_id not in self._cache:
            m = _match_matrix(self.store, image_id, self.dets, self.variant, self.overlap)
            self._cache[image_id] = _normalize_rows(m) if self.normalize else m
        return self._cache[image_id]


def match_regions(
    store: DescriptorStore,
    source: tuple[str, Region],
    target_id: str,
    variant: str = "anchor-ag",
    dets: dict[str, AnchorDetections] | None = None,
    normalize: bool = True,
    overlap: OverlapConfig | None = None,
    _cache: "_MatchMatrixCache | None" = None,
) -> Region:
    """Best-matching proposal of the target image for a source region.

    Maximizes the inner product of the chosen embedding (L2-normalized
    copies when ``normalize``); ties break to the lowest proposal index.
    """
    overlap = overlap or OverlapConfig()
    src_id, src_region = source
    src_record = store[src_id]
    src_idx = src_record.find_proposal(src_region)
    if _cache is None:
        _cache = _MatchMatrixCache(store, dets, variant, overlap, normalize)
    src_m = _cache.matrix(src_id)
    tgt_m = _cache.matrix(target_id)
    scores = tgt_m @ src_m[src_idx]
    return store[target_id].proposals[int(np.argmax(scores))]


@dataclass
class MatchResult:
    mean_iou: dict[str, float]
    per_pair: list[tuple[str, str, str, float]]  # source, target, concept, iou
    skipped: int = 0

    @property
    def overall_mean(self) -> float:
        vals = [v for _, _, _, v in self.per_pair]
        return float(np.mean(vals)) if vals else 0.0


def match_benchmark(
    store: DescriptorStore,
    gt: GroundTruth,
    pairs: list[tuple[str, str]],
    variant: str = "anchor-ag",
    dets: dict[str, AnchorDetections] | None = None,
    normalize: bool = True,
    overlap: OverlapConfig | None = None,
) -> MatchResult:
    """Mean match IoU per concept over source/target image pairs.

    Each source ground-truth part is matched into the target via the
    nearest-proposal embedding argmax, then scored against the target's
    same-concept ground truth, taking the best-overlapping instance when
    the part occurs more than once. Pairs whose target lacks the concept
    are skipped and counted.
    """
    per_concept: dict[str, list[float]] = {}
    per_pair = []
    skipped = 0
    cache = _MatchMatrixCache(store, dets, variant, overlap or OverlapConfig(), normalize)
    for src_id, tgt_id in pairs:
        for box in gt.boxes(src_id):
            if box.ignored:
                continue
            tgt_boxes = [b for b in gt.boxes(tgt_id, box.concept) if not b.ignored]
            if not tgt_boxes:
                skipped += 1
                continue
            src_record = store[src_id]
            ious = rho_pairs(
                box.region.as_array()[None, :], src_record.proposal_boxes(), _HARD
            )
            src_prop = src_record.proposals[int(np.argmax(ious))]
            predicted = match_regions(
                store, (src_id, src_prop), tgt_id, variant, dets, normalize, overlap,
                _cache=cache,
            )
            best = max(iou(predicted, b.region) for b in tgt_boxes)
            per_concept.setdefault(box.concept, []).append(best)
            per_pair.append((src_id, tgt_id, box.concept, best))
    return MatchResult(
        mean_iou={c: float(np.mean(v)) for c, v in sorted(per_concept.items())},
        per_pair=per_pair,
        skipped=skipped,
    )


def grid_encode(
    record,
    bank: AnchorBank,
    grids: tuple[tuple[int, int], ...] = ((1, 1), (2, 2)),
) -> np.ndarray:
    """Spatial-grid image descriptor from anchor responses.

    Per grid cell and anchor, the maximum anchor score over proposals whose
    centre falls in the cell (0 when the cell is empty); blocks are
    concatenated cell-major and L2-normalized. The default grids give a
    vector of length ``K * 5``.
    """
    scores = record.descriptors @ bank.weights.T if record.n_proposals else np.zeros((0, bank.k))
    centers = np.array([r.center for r in record.proposals]) if record.n_proposals else np.zeros((0, 2))
    blocks = []
    for gx, gy in grids:
        for cy in range(gy):
            for cx in range(gx):
                x_lo, x_hi = cx * record.width / gx, (cx + 1) * record.width / gx
                y_lo, y_hi = cy * record.height / gy, (cy + 1) * record.height / gy
                inside = np.zeros(record.n_proposals, dtype=bool)
                if record.n_proposals:
                    inside = (
                        (centers[:, 0] >= x_lo)
                        & ((centers[:, 0] < x_hi) | (cx == gx - 1))
                        & (centers[:, 1] >= y_lo)
                        & ((centers[:, 1] < y_hi) | (cy == gy - 1))
                    )
                if np.any(inside):
                    blocks.append(np.max(scores[inside], axis=0))
                else:
                    blocks.append(np.zeros(bank.k))
    vec = np.concatenate(blocks)
    norm = np.linalg.norm(vec)
    return vec / norm if norm > 0.0 else vec


def grid_search_lambda(
    train_fn,
    evaluate_fn,
    grid: tuple[float, ...] = (1e-4, 1e-3, 1e-2),
) -> tuple[float, dict[float, float]]:
    """Pick the regularizer by validation CorLoc.

    ``train_fn(lam)`` returns a model; ``evaluate_fn(model)`` returns the
    validation score (higher is better). Ties prefer the smaller lambda.
    """
    scores = {}
    for lam in grid:
        scores[lam] = float(evaluate_fn(train_fn(lam)))
    best = max(sorted(scores), key=lambda lam: scores[lam])
    return best, scores
