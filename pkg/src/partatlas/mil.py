"""Multiple-instance learning of part detectors over any embedding variant.

Training alternates between (a) minimizing the regularized hinge objective
in the weight vector for fixed per-positive-image region selections and
(b) re-selecting each positive image's maximum-scoring region. The default
schedule runs the first rounds on the appearance(+context) embedding and
the remaining rounds on the variant's full embedding; the weight vector is
re-trained from zero at the switch because its dimension changes.

An optional single strong annotation biases relocalization toward regions
that look like the annotated exemplar; it never affects test-time scoring.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .anchors import AnchorBank, WeakImageSet, detect_anchors_all
from .embeddings import (
    AnchorDetections,
    DescriptorStore,
    EmbeddingConfig,
    VARIANTS,
    embed_all,
    embedding_dim,
)
from .errors import ConfigError, DataError, MissingProposalError
from .geometry import OverlapConfig, Region, rho_pairs

__all__ = [
    "MilConfig",
    "PartModel",
    "ExemplarSpec",
    "RoundLog",
    "EmbeddedDataset",
    "embed_dataset",
    "mil_objective",
    "relocalize",
    "train_part",
    "detect_part",
]

_HARD = OverlapConfig(mode="hard")


@dataclass(frozen=True)
class MilConfig:
    lam: float = 1e-3
    appearance_rounds: int = 5
    joint_rounds: int = 5
    epochs: int = 60
    base_lr: float = 1.0
    seed: int = 0
    overlap: OverlapConfig = field(default_factory=OverlapConfig)
    context_scale: float = 2.0
    detections_per_anchor: int = 5
    anchor_nms_iou: float = 0.3

    def __post_init__(self) -> None:
        if self.lam < 0.0:
            raise ConfigError(f"lam must be >= 0, got {self.lam}")
        if self.appearance_rounds < 0 or self.joint_rounds < 0:
            raise ConfigError("round counts must be >= 0")
        if self.epochs < 1 or not self.base_lr > 0.0:
            raise ConfigError("solver needs epochs >= 1 and a positive base_lr")


@dataclass(frozen=True)
class RoundLog:
    round_index: int
    phase: str
    objective: float
    changed: int


@dataclass
class PartModel:
    """A trained linear part detector on one embedding variant."""

    w: np.ndarray
    variant: str
    lam: float
    d_a: int
    n_anchors: int
    config: MilConfig = field(default_factory=MilConfig)
    training_log: list[RoundLog] = field(default_factory=list)
    final_selections: dict[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.w = np.asarray(self.w, dtype=float)
        expected = embedding_dim(self.variant, self.d_a, self.n_anchors)
        if self.w.shape != (expected,):
            raise ConfigError(
                f"weight dim {self.w.shape} does not match variant {self.variant} "
                f"with d_a={self.d_a}, K={self.n_anchors} (expected {expected})"
            )


@dataclass(frozen=True)
class ExemplarSpec:
    """The single strongly-annotated example used to pin down part extent."""

    image_id: str
    region: Region
    beta: float = 1.0

    def __post_init__(self) -> None:
        if self.beta < 0.0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")


class EmbeddedDataset:
    """Per-image embedding matrices for a fixed variant and anchor state.

    Embeddings are functions of the frozen proposals, descriptors, and
    anchor detections, so they are computed once and reused across rounds.
    """

    def __init__(
        self,
        store: DescriptorStore,
        items: list[tuple[str, int]],
        dets: dict[str, AnchorDetections] | None,
        cfg: EmbeddingConfig,
    ):
        self.store = store
        self.items = list(items)
        self.cfg = cfg
        self.matrices: dict[str, np.ndarray] = {}
        self.labels: dict[str, int] = {}
        for image_id, label in self.items:
            record = store[image_id]
            d = dets.get(image_id) if dets is not None else None
            if cfg.uses_geometry and d is None:
                raise ConfigError(
                    f"variant {cfg.variant} needs anchor detections for image {image_id!r}"
                )
            self.matrices[image_id] = embed_all(record, d, cfg)
            self.labels[image_id] = label
        dims = {m.shape[1] for m in self.matrices.values()}
        if len(dims) > 1:
            raise DataError(f"inconsistent embedding dims across images: {sorted(dims)}")
        self.dim = dims.pop() if dims else 0

    @classmethod
    def for_images(
        cls,
        store: DescriptorStore,
        image_ids: list[str],
        dets: dict[str, AnchorDetections] | None,
        cfg: EmbeddingConfig,
    ) -> "EmbeddedDataset":
        return cls(store, [(i, 1) for i in image_ids], dets, cfg)

    def positives(self) -> list[str]:
        return [i for i, y in self.items if y == 1]

    def negatives(self) -> list[str]:
        return [i for i, y in self.items if y == -1]

    def embeddings(self, image_id: str) -> np.ndarray:
        try:
            return self.matrices[image_id]
        except KeyError:
            raise DataError(f"no embeddings for image {image_id!r}") from None


def embed_dataset(
    data: WeakImageSet,
    dets: dict[str, AnchorDetections] | None,
    cfg: EmbeddingConfig,
) -> EmbeddedDataset:
    """Embed every bag image of a weak image set under one variant."""
    return EmbeddedDataset(data.store, [(it.image_id, it.label) for it in data.items], dets, cfg)


def _selection_index(store: DescriptorStore, image_id: str, region: Region) -> int:
    return store[image_id].find_proposal(region)


def mil_objective(
    model: PartModel,
    embedded: EmbeddedDataset,
    selections: dict[str, Region] | None,
) -> float:
    """Regularized hinge objective.

    Positive images score their given selection when ``selections`` is
    provided (the alternation setting) and their maximum-scoring proposal
    when it is ``None`` (evaluation); negatives always use their max.
    """
    return _objective_on_indices(
        model.w,
        model.lam,
        embedded,
        None if selections is None else {
            i: _selection_index(embedded.store, i, r) for i, r in selections.items()
        },
    )


def _objective_on_indices(
    w: np.ndarray,
    lam: float,
    embedded: EmbeddedDataset,
    sel_idx: dict[str, int] | None,
) -> float:
    total = 0.0
    n = len(embedded.items)
    if n == 0:
        raise DataError("empty dataset")
    for image_id, label in embedded.items:
        e = embedded.embeddings(image_id)
        if e.shape[0] == 0:
            raise DataError(f"image {image_id!r} has no proposals")
        scores = e @ w
        if label == 1 and sel_idx is not None:
            if image_id not in sel_idx:
                raise DataError(f"no selection for positive image {image_id!r}")
            s = scores[sel_idx[image_id]]
        else:
            s = np.max(scores)
        total += max(0.0, 1.0 - label * s)
    return 0.5 * lam * float(w @ w) + total / n


def _exemplar_appearance(store: DescriptorStore, exemplar: ExemplarSpec) -> np.ndarray:
    """Appearance row of the annotated region (max-IoU proposal fallback)."""
    record = store[exemplar.image_id]
    try:
        idx = record.find_proposal(exemplar.region)
    except MissingProposalError:
        ious = rho_pairs(
            exemplar.region.as_array()[None, :], record.proposal_boxes(), _HARD
        )
        idx = int(np.argmax(ious))
    return record.descriptors[idx]


def _exemplar_normalizer(
    embedded: EmbeddedDataset,
    exemplar: ExemplarSpec,
    sel_idx: dict[str, int],
    exemplar_row: np.ndarray,
) -> float:
    """Average exemplar-similarity factor over the positives' selections."""
    sims = [
        float(embedded.store[i].descriptors[sel_idx[i]] @ exemplar_row)
        for i in embedded.positives()
    ]
    return float(np.mean([np.exp(exemplar.beta * s) for s in sims]))


def relocalize(
    model: PartModel,
    image_id: str,
    embedded: EmbeddedDataset,
    exemplar: ExemplarSpec | None = None,
    selections: dict[str, Region] | None = None,
) -> Region:
    """Maximum-scoring proposal of a positive image, exemplar-biased if given.

    Ties break toward the lowest proposal index. The exemplar factor needs
    the other positives' current selections to compute its normalizer.
    """
    idx = _relocalize_index(model.w, image_id, embedded, exemplar, _to_indices(embedded, selections))
    return embedded.store[image_id].proposals[idx]


def _to_indices(
    embedded: EmbeddedDataset, selections: dict[str, Region] | None
) -> dict[str, int] | None:
    if selections is None:
        return None
    return {i: _selection_index(embedded.store, i, r) for i, r in selections.items()}


def _relocalize_index(
    w: np.ndarray,
    image_id: str,
    embedded: EmbeddedDataset,
    exemplar: ExemplarSpec | None,
    sel_idx: dict[str, int] | None,
) -> int:
    e = embedded.embeddings(image_id)
    if e.shape[0] == 0:
        raise DataError(f"image {image_id!r} has no proposals")
    scores = e @ w
    if exemplar is not None and embedded.labels.get(image_id) == 1:
        if sel_idx is None:
            raise ConfigError("exemplar relocalization needs the current selections")
        row = _exemplar_appearance(embedded.store, exemplar)
        c = _exemplar_normalizer(embedded, exemplar, sel_idx, row)
        sims = embedded.store[image_id].descriptors @ row
        scores = scores * (np.exp(exemplar.beta * sims) / c)
    return int(np.argmax(scores))


def _solve_w(
    w0: np.ndarray,
    embedded: EmbeddedDataset,
    sel_idx: dict[str, int],
    lam: float,
    epochs: int,
    base_lr: float,
) -> np.ndarray:
    """Deterministic full-batch subgradient descent on the fixed-selection
    objective with a Pegasos-style 1/(lam*t) schedule.

    Returns the best of all iterates, their running average, and ``w0``
    itself, so a round's w-step can never increase the objective relative
    to its warm start.
    """
    pos_rows = np.array(
        [embedded.embeddings(i)[sel_idx[i]] for i in embedded.positives()]
    )
    negs = [(i, embedded.embeddings(i)) for i in embedded.negatives()]
    n = len(embedded.items)

    def objective(w: np.ndarray) -> float:
        total = 0.0
        if len(pos_rows):
            total += float(np.sum(np.maximum(0.0, 1.0 - pos_rows @ w)))
        for _, e in negs:
            total += max(0.0, 1.0 + float(np.max(e @ w)))
        return 0.5 * lam * float(w @ w) + total / n

    def subgradient(w: np.ndarray) -> np.ndarray:
        g = lam * w.copy()
        if len(pos_rows):
            active = (pos_rows @ w) < 1.0
            if np.any(active):
                g -= np.sum(pos_rows[active], axis=0) / n
        for _, e in negs:
            scores = e @ w
            j = int(np.argmax(scores))
            if 1.0 + scores[j] > 0.0:
                g += e[j] / n
        return g

    w = w0.copy()
    best_w, best_obj = w.copy(), objective(w)
    radius = np.sqrt(2.0 / lam)  # the optimum lies in this ball: J(w*) <= J(0) <= 1
    running = np.zeros_like(w)
    tail_start = epochs // 2 + 1
    for epoch in range(1, epochs + 1):
        w = w - (base_lr / (lam * epoch)) * subgradient(w)
        norm = np.linalg.norm(w)
        if norm > radius:
            w = w * (radius / norm)
        if epoch >= tail_start:
            running += w
        obj = objective(w)
        if obj < best_obj:
            best_obj, best_w = obj, w.copy()
    averaged = running / (epochs - tail_start + 1)
    if objective(averaged) < best_obj:
        return averaged
    return best_w


def _initial_selections(embedded: EmbeddedDataset) -> dict[str, int]:
    """Warm start: the whole-image proposal, or the largest one."""
    out = {}
    for image_id in embedded.positives():
        record = embedded.store[image_id]
        boxes = record.proposal_boxes()
        covers = (
            (boxes[:, 0] <= 1e-9)
            & (boxes[:, 1] <= 1e-9)
            & (boxes[:, 2] >= record.width - 1e-9)
            & (boxes[:, 3] >= record.height - 1e-9)
        )
        if np.any(covers):
            out[image_id] = int(np.argmax(covers))
        else:
            areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
            out[image_id] = int(np.argmax(areas))
    return out


def _phase_plan(variant: str, cfg: MilConfig) -> list[tuple[str, str, int]]:
    appearance_variant = "B+C" if variant in ("B+C", "B+C+G") else "B"
    if appearance_variant == variant:
        return [("appearance", variant, cfg.appearance_rounds + cfg.joint_rounds)]
    return [
        ("appearance", appearance_variant, cfg.appearance_rounds),
        ("joint", variant, cfg.joint_rounds),
    ]


def train_part(
    data: WeakImageSet,
    variant: str,
    anchors: AnchorBank | None = None,
    exemplar: ExemplarSpec | None = None,
    cfg: MilConfig = MilConfig(),
    dets: dict[str, AnchorDetections] | None = None,
) -> PartModel:
    """Alternating MIL training of one part detector.

    Anchor detections are computed from ``anchors`` unless passed in
    precomputed. The exemplar factor only ever steers relocalization;
    the returned model scores regions with the weight vector alone.
    """
    if variant not in VARIANTS:
        raise ConfigError(f"variant must be one of {VARIANTS}, got {variant!r}")
    needs_g = variant in ("B+G", "B+C+G")
    if needs_g and anchors is None and dets is None:
        raise ConfigError(f"variant {variant} requires an anchor bank or detections")
    if needs_g and dets is None:
        dets = detect_anchors_all(
            anchors, data.store, L=cfg.detections_per_anchor, nms_iou=cfg.anchor_nms_iou
        )
    d_a = data.store.descriptor_dim
    n_anchors = 0
    if needs_g:
        n_anchors = anchors.k if anchors is not None else next(iter(dets.values())).n_anchors

    log: list[RoundLog] = []
    selections: dict[str, int] = {}
    w = np.zeros(0)
    embedded: EmbeddedDataset | None = None
    round_index = 0
    for phase_name, phase_variant, rounds in _phase_plan(variant, cfg):
        if rounds == 0:
            continue
        phase_cfg = EmbeddingConfig(
            variant=phase_variant, overlap=cfg.overlap, context_scale=cfg.context_scale
        )
        embedded = embed_dataset(data, dets if phase_cfg.uses_geometry else None, phase_cfg)
        if not selections:
            selections = _initial_selections(embedded)
        w = np.zeros(embedded.dim)  # dimensions change across phases
        for _ in range(rounds):
            round_index += 1
            w = _solve_w(w, embedded, selections, cfg.lam, cfg.epochs, cfg.base_lr)
            new_sel = dict(selections)
            for image_id in embedded.positives():
                new_sel[image_id] = _relocalize_index(
                    w, image_id, embedded, exemplar, selections
                )
            changed = sum(1 for i in selections if selections[i] != new_sel[i])
            selections = new_sel
            log.append(
                RoundLog(
                    round_index=round_index,
                    phase=phase_name,
                    objective=_objective_on_indices(w, cfg.lam, embedded, selections),
                    changed=changed,
                )
            )
    if embedded is None:
        raise ConfigError("training schedule has zero rounds")
    return PartModel(
        w=w,
        variant=variant,
        lam=cfg.lam,
        d_a=d_a,
        n_anchors=n_anchors,
        config=cfg,
        training_log=log,
        final_selections=dict(selections),
    )


def detect_part(
    model: PartModel,
    image_id: str,
    embedded: EmbeddedDataset,
    top_n: int = 5,
    nms_iou: float = 0.3,
) -> list[tuple[Region, float]]:
    """Score all proposals with the model, NMS, return the top ranked."""
    if top_n < 1:
        raise ConfigError(f"top_n must be >= 1, got {top_n}")
    if not 0.0 <= nms_iou < 1.0:
        raise ConfigError(f"nms_iou must be in [0, 1), got {nms_iou}")
    record = embedded.store[image_id]
    e = embedded.embeddings(image_id)
    n = e.shape[0]
    if n == 0:
        return []
    scores = e @ model.w
    boxes = record.proposal_boxes()
    pairwise = rho_pairs(boxes[:, None, :], boxes[None, :, :], _HARD)
    order = np.lexsort((np.arange(n), -scores))
    kept: list[int] = []
    for idx in order:
        if len(kept) == top_n:
            break
        if any(pairwise[idx, j] > nms_iou for j in kept):
            continue
        kept.append(int(idx))
    return [(record.proposals[i], float(scores[i])) for i in kept]
