"""Learning and running non-semantic anchor detectors from weak labels.

Each anchor is a linear scoring vector over appearance descriptors. The
bank is trained on image-level labels with a hinge-style objective that
rewards firing on positive images, penalizes firing on negatives, and
adds a squared-cosine penalty between anchor pairs so the detectors stay
mutually diverse instead of collapsing onto the most prominent pattern.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .embeddings import AnchorDetections, DescriptorStore, Detection, ImageRecord
from .errors import ConfigError, DataError, NumericError
from .geometry import rho_pairs, OverlapConfig

__all__ = [
    "AnchorHyperParams",
    "AnchorBank",
    "WeakImage",
    "WeakImageSet",
    "anchor_objective",
    "anchor_objective_grad",
    "train_anchors",
    "detect_anchors",
    "detect_anchors_all",
]

logger = logging.getLogger(__name__)

_HARD = OverlapConfig(mode="hard")


@dataclass(frozen=True)
class AnchorHyperParams:
    k: int = 150
    lam: float = 1e-4
    gamma: float = 1.0
    learning_rate: float = 0.01
    momentum: float = 0.9
    iterations: int = 40_000
    seed: int = 0
    log_every: int = 1_000

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.gamma > 0.0 and self.k < 2:
            raise ConfigError("orthogonality (gamma > 0) needs at least two anchors")
        if self.gamma < 0.0 or self.lam < 0.0:
            raise ConfigError("lam and gamma must be non-negative")
        if not self.learning_rate > 0.0:
            raise ConfigError(f"learning rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.iterations < 0:
            raise ConfigError(f"iterations must be >= 0, got {self.iterations}")


@dataclass
class AnchorBank:
    """K trained anchor weight vectors plus the settings that produced them."""

    weights: np.ndarray
    hyper: AnchorHyperParams
    training_log: list[tuple[int, float]] = field(default_factory=list)
    skipped_images: int = 0

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.ndim != 2:
            raise ConfigError("anchor weights must be a (K, d_a) matrix")

    @property
    def k(self) -> int:
        return self.weights.shape[0]

    @property
    def descriptor_dim(self) -> int:
        return self.weights.shape[1]


@dataclass(frozen=True)
class WeakImage:
    image_id: str
    label: int

    def __post_init__(self) -> None:
        if self.label not in (1, -1):
            raise DataError(f"image {self.image_id!r}: label must be +1 or -1, got {self.label}")


class WeakImageSet:
    """Weakly labelled images backed by a descriptor store."""

    def __init__(self, items: list[WeakImage], store: DescriptorStore):
        labels = {it.label for it in items}
        if 1 not in labels or -1 not in labels:
            raise DataError("a weak image set needs at least one positive and one negative image")
        seen = set()
        for it in items:
            if it.image_id in seen:
                raise DataError(f"duplicate image id {it.image_id!r} in weak image set")
            seen.add(it.image_id)
            store[it.image_id]  # raises on unknown id
        self.items = list(items)
        self.store = store

    def __len__(self) -> int:
        return len(self.items)

    def positives(self) -> list[WeakImage]:
        return [it for it in self.items if it.label == 1]

    def negatives(self) -> list[WeakImage]:
        return [it for it in self.items if it.label == -1]


def _orthogonality_penalty(weights: np.ndarray) -> float:
    units = weights / np.linalg.norm(weights, axis=1, keepdims=True)
    c = units @ units.T
    np.fill_diagonal(c, 0.0)
    return float(np.sum(c**2))


def _orthogonality_grad(weights: np.ndarray) -> np.ndarray:
    """Gradient of the squared-cosine penalty, normalization Jacobian included."""
    norms = np.linalg.norm(weights, axis=1, keepdims=True)
    units = weights / norms
    c = units @ units.T
    np.fill_diagonal(c, 0.0)
    # d/dw_k sum_{k != q} c_kq^2 = (4 / ||w_k||) sum_q c_kq (u_q - c_kq u_k)
    pull = c @ units
    diag = np.sum(c**2, axis=1, keepdims=True)
    return 4.0 * (pull - diag * units) / norms


def _per_image_terms(
    weights: np.ndarray, record: ImageRecord
) -> tuple[np.ndarray, np.ndarray]:
    """Per-anchor max proposal score and the argmax row index."""
    scores = record.descriptors @ weights.T
    best = np.argmax(scores, axis=0)
    return scores[best, np.arange(weights.shape[0])], best


def anchor_objective(bank: AnchorBank, data: WeakImageSet) -> float:
    """Full training objective of the bank on the weak image set.

    Images without proposals are skipped (their count is logged once).
    """
    return _objective_and_grad(bank.weights, bank.hyper, data, want_grad=False)[0]


def anchor_objective_grad(bank: AnchorBank, data: WeakImageSet) -> tuple[float, np.ndarray]:
    """Objective value and its exact full-batch (sub)gradient."""
    return _objective_and_grad(bank.weights, bank.hyper, data, want_grad=True)


def _objective_and_grad(
    weights: np.ndarray,
    hyper: AnchorHyperParams,
    data: WeakImageSet,
    want_grad: bool,
) -> tuple[float, np.ndarray]:
    if weights.shape[1] != data.store.descriptor_dim:
        raise ConfigError(
            f"anchor dim {weights.shape[1]} != descriptor dim {data.store.descriptor_dim}"
        )
    k = weights.shape[0]
    data_term = np.zeros(k)
    grad = np.zeros_like(weights) if want_grad else None
    used = 0
    skipped = 0
    for item in data.items:
        record = data.store[item.image_id]
        if record.n_proposals == 0:
            skipped += 1
            continue
        used += 1
        best_scores, best_idx = _per_image_terms(weights, record)
        hinge = np.maximum(best_scores, 0.0)
        data_term += item.label * hinge
        if want_grad:
            active = best_scores > 0.0
            if np.any(active):
                grad[active] -= item.label * record.descriptors[best_idx[active]]
    if skipped:
        logger.warning("anchor objective skipped %d images without proposals", skipped)
    if used == 0:
        raise DataError("all images were skipped: no proposals anywhere")
    value = (
        0.5 * hyper.lam * float(np.sum(weights**2))
        - float(np.sum(data_term)) / used
        + hyper.gamma * _orthogonality_penalty(weights)
    )
    if not want_grad:
        return value, np.zeros(0)
    grad = grad / used + hyper.lam * weights + hyper.gamma * _orthogonality_grad(weights)
    return value, grad


class _AlternatingSampler:
    """Strict positive/negative alternation, uniform without replacement
    within each class per epoch."""

    def __init__(self, data: WeakImageSet, rng: np.random.Generator):
        self._pools = {
            1: [it.image_id for it in data.positives()],
            -1: [it.image_id for it in data.negatives()],
        }
        self._queues: dict[int, list[str]] = {1: [], -1: []}
        self._rng = rng

    def next(self, label: int) -> str:
        queue = self._queues[label]
        if not queue:
            queue = list(self._pools[label])
            self._rng.shuffle(queue)
            self._queues[label] = queue
        return queue.pop()


def _init_weights(data: WeakImageSet, hyper: AnchorHyperParams, rng: np.random.Generator) -> np.ndarray:
    """Each anchor starts at the descriptor of a distinct proposal drawn
    from the positive images, keeping the bank on the data manifold."""
    candidates: list[tuple[str, int]] = []
    for item in data.positives():
        record = data.store[item.image_id]
        candidates.extend((item.image_id, i) for i in range(record.n_proposals))
    if len(candidates) < hyper.k:
        raise DataError(
            f"need at least {hyper.k} positive-image proposals to initialize, "
            f"found {len(candidates)}"
        )
    picks = rng.choice(len(candidates), size=hyper.k, replace=False)
    rows = []
    for p in picks:
        image_id, idx = candidates[int(p)]
        row = data.store[image_id].descriptors[idx]
        rows.append(row / np.linalg.norm(row))
    return np.array(rows)


def train_anchors(data: WeakImageSet, hyper: AnchorHyperParams) -> AnchorBank:
    """SGD with momentum on the anchor objective, alternating between
    positive and negative images. Deterministic given the seed."""
    if hyper.k > 0 and data.store.descriptor_dim < 1:
        raise ConfigError("descriptor store is empty")
    rng = np.random.default_rng(hyper.seed)
    weights = _init_weights(data, hyper, rng)
    velocity = np.zeros_like(weights)
    sampler = _AlternatingSampler(data, rng)
    log: list[tuple[int, float]] = []
    skipped = 0
    for step in range(hyper.iterations):
        label = 1 if step % 2 == 0 else -1
        record = data.store[sampler.next(label)]
        grad = hyper.lam * weights + hyper.gamma * _orthogonality_grad(weights)
        if record.n_proposals == 0:
            skipped += 1
        else:
            best_scores, best_idx = _per_image_terms(weights, record)
            active = best_scores > 0.0
            if np.any(active):
                grad[active] -= label * record.descriptors[best_idx[active]]
        velocity = hyper.momentum * velocity - hyper.learning_rate * grad
        weights = weights + velocity
        if hyper.log_every and (step + 1) % hyper.log_every == 0:
            value, _ = _objective_and_grad(weights, hyper, data, want_grad=False)
            log.append((step + 1, value))
    if skipped:
        logger.warning("anchor training skipped %d proposal-less image draws", skipped)
    norms = np.linalg.norm(weights, axis=1)
    if hyper.iterations > 0 and np.any(norms < 1e-6):
        raise NumericError(
            f"anchor training collapsed {int(np.sum(norms < 1e-6))} weight vectors to zero"
        )
    return AnchorBank(weights=weights, hyper=hyper, training_log=log, skipped_images=skipped)


def detect_anchors(
    bank: AnchorBank,
    record: ImageRecord,
    L: int = 5,
    nms_iou: float = 0.3,
) -> AnchorDetections:
    """Top non-overlapping proposals per anchor, greedy NMS on hard IoU.

    Scores are kept raw (possibly negative); the geometric embedding gates
    them at zero later.
    """
    if L < 1:
        raise ConfigError(f"L must be >= 1, got {L}")
    if not 0.0 <= nms_iou < 1.0:
        raise ConfigError(f"nms_iou must be in [0, 1), got {nms_iou}")
    boxes = record.proposal_boxes()
    n = record.n_proposals
    per_anchor: list[tuple[Detection, ...]] = []
    if n:
        all_scores = record.descriptors @ bank.weights.T
        pairwise = rho_pairs(boxes[:, None, :], boxes[None, :, :], _HARD)
    for k in range(bank.k):
        if n == 0:
            per_anchor.append(())
            continue
        scores = all_scores[:, k]
        order = np.lexsort((np.arange(n), -scores))
        kept: list[int] = []
        for idx in order:
            if len(kept) == L:
                break
            if any(pairwise[idx, j] > nms_iou for j in kept):
                continue
            kept.append(int(idx))
        per_anchor.append(
            tuple(Detection(record.proposals[i], float(scores[i])) for i in kept)
        )
    return AnchorDetections(
        image_id=record.image_id,
        per_anchor=tuple(per_anchor),
        nms_iou=nms_iou,
        max_per_anchor=L,
    )


def detect_anchors_all(
    bank: AnchorBank,
    store: DescriptorStore,
    L: int = 5,
    nms_iou: float = 0.3,
    threads: int = 1,
) -> dict[str, AnchorDetections]:
    """Run :func:`detect_anchors` on every image; order-deterministic."""
    ids = store.image_ids()
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda i: detect_anchors(bank, store[i], L, nms_iou), ids))
        return dict(zip(ids, results))
    return {i: detect_anchors(bank, store[i], L, nms_iou) for i in ids}
