"""Region descriptors: appearance, context, geometric, and joint embeddings.

The geometric embedding of a region is a K-vector of score-gated soft
overlaps with each anchor's top detections; the joint embedding is its
Kronecker product with the appearance descriptor (appearance-major), so a
linear model on the joint space interpolates K appearance models weighted
by where the region sits relative to the anchors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, InvalidRegionError, MissingProposalError
from .geometry import OverlapConfig, Region, rho_pairs

__all__ = [
    "ImageRecord",
    "DescriptorStore",
    "Detection",
    "AnchorDetections",
    "EmbeddingConfig",
    "VARIANTS",
    "context_region",
    "geometric_embed",
    "joint_embed",
    "embed",
    "embed_all",
    "embedding_dim",
]

VARIANTS = ("B", "B+C", "B+G", "B+C+G")

_UNIT_NORM_TOL = 1e-4


@dataclass
class ImageRecord:
    """One image's proposals and their appearance descriptors.

    ``descriptors`` has one L2-normalized row per proposal.
    """

    image_id: str
    width: float
    height: float
    proposals: tuple[Region, ...]
    descriptors: np.ndarray
    uri: str | None = None

    def __post_init__(self) -> None:
        self.descriptors = np.asarray(self.descriptors, dtype=float)
        if self.descriptors.ndim != 2:
            raise DataError(f"image {self.image_id!r}: descriptors must be a 2-D matrix")
        if len(self.proposals) != self.descriptors.shape[0]:
            raise DataError(
                f"image {self.image_id!r}: {len(self.proposals)} proposals but "
                f"{self.descriptors.shape[0]} descriptor rows"
            )
        norms = np.linalg.norm(self.descriptors, axis=1)
        if self.descriptors.shape[0] and np.any(np.abs(norms - 1.0) > _UNIT_NORM_TOL):
            worst = float(np.abs(norms - 1.0).max())
            raise DataError(
                f"image {self.image_id!r}: descriptor rows must be unit-norm "
                f"(worst deviation {worst:.2e}); renormalize on load"
            )

    @property
    def n_proposals(self) -> int:
        return len(self.proposals)

    def proposal_boxes(self) -> np.ndarray:
        return np.array([r.as_array() for r in self.proposals])

    def find_proposal(self, region: Region, tol: float = 1e-9) -> int:
        """Index of the proposal matching ``region`` coordinate-wise."""
        target = region.as_array()
        for i, p in enumerate(self.proposals):
            if np.all(np.abs(p.as_array() - target) <= tol):
                return i
        raise MissingProposalError(
            f"region [{region.x1}, {region.x2}] x [{region.y1}, {region.y2}] is not a "
            f"proposal of image {self.image_id!r}"
        )


class DescriptorStore:
    """All images' proposals and appearance descriptors, keyed by image id."""

    def __init__(self, records: list[ImageRecord] | None = None):
        self._records: dict[str, ImageRecord] = {}
        for rec in records or []:
            self.add(rec)

    def add(self, record: ImageRecord) -> None:
        if record.image_id in self._records:
            raise DataError(f"duplicate image id {record.image_id!r}")
        if self._records:
            d = self.descriptor_dim
            if record.descriptors.shape[1] != d:
                raise DataError(
                    f"image {record.image_id!r}: descriptor dim "
                    f"{record.descriptors.shape[1]} != store dim {d}"
                )
        self._records[record.image_id] = record

    def __getitem__(self, image_id: str) -> ImageRecord:
        try:
            return self._records[image_id]
        except KeyError:
            raise DataError(f"unknown image id {image_id!r}") from None

    def __contains__(self, image_id: str) -> bool:
        return image_id in self._records

    def __len__(self) -> int:
        return len(self._records)

    def image_ids(self) -> list[str]:
        return list(self._records)

    def records(self) -> list[ImageRecord]:
        return list(self._records.values())

    @property
    def descriptor_dim(self) -> int:
        if not self._records:
            raise DataError("empty descriptor store has no dimension")
        return next(iter(self._records.values())).descriptors.shape[1]


@dataclass(frozen=True)
class Detection:
    region: Region
    score: float


@dataclass
class AnchorDetections:
    """Per-anchor top detections for one image, each list score-descending
    and mutually non-overlapping under the NMS threshold used to build it."""

    image_id: str
    per_anchor: tuple[tuple[Detection, ...], ...]
    nms_iou: float
    max_per_anchor: int

    def __post_init__(self) -> None:
        hard = OverlapConfig(mode="hard")
        for dets in self.per_anchor:
            if len(dets) > self.max_per_anchor:
                raise DataError(
                    f"image {self.image_id!r}: anchor has {len(dets)} detections, "
                    f"limit is {self.max_per_anchor}"
                )
            scores = [d.score for d in dets]
            if any(a < b for a, b in zip(scores, scores[1:])):
                raise DataError(f"image {self.image_id!r}: detections not score-sorted")
            if len(dets) > 1:
                boxes = np.array([d.region.as_array() for d in dets])
                overlaps = rho_pairs(boxes[:, None, :], boxes[None, :, :], hard)
                np.fill_diagonal(overlaps, 0.0)
                if np.any(overlaps > self.nms_iou + 1e-9):
                    raise DataError(
                        f"image {self.image_id!r}: detections overlap beyond the "
                        f"NMS threshold {self.nms_iou}"
                    )

    @property
    def n_anchors(self) -> int:
        return len(self.per_anchor)


@dataclass(frozen=True)
class EmbeddingConfig:
    """Which region descriptor to build and with what overlap smoothing."""

    variant: str = "B+C+G"
    overlap: OverlapConfig = field(default_factory=OverlapConfig)
    context_scale: float = 2.0

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not self.context_scale > 1.0:
            raise ConfigError(f"context_scale must be > 1, got {self.context_scale}")

    @property
    def uses_context(self) -> bool:
        return self.variant in ("B+C", "B+C+G")

    @property
    def uses_geometry(self) -> bool:
        return self.variant in ("B+G", "B+C+G")


def context_region(r: Region, scale: float, image_w: float, image_h: float) -> Region:
    """Centre-preserving dilation of ``r`` by ``scale``, clipped to the image."""
    if not scale > 1.0:
        raise ConfigError(f"context scale must be > 1, got {scale}")
    if r.x1 < 0 or r.y1 < 0 or r.x2 > image_w or r.y2 > image_h:
        raise InvalidRegionError(
            f"region [{r.x1}, {r.x2}] x [{r.y1}, {r.y2}] lies outside the "
            f"{image_w} x {image_h} image"
        )
    cx, cy = r.center
    hw = 0.5 * scale * r.width
    hh = 0.5 * scale * r.height
    return Region(
        max(cx - hw, 0.0),
        max(cy - hh, 0.0),
        min(cx + hw, image_w),
        min(cy + hh, image_h),
    )


def geometric_embed(r: Region, dets: AnchorDetections, cfg: EmbeddingConfig) -> np.ndarray:
    """Score-gated anchor-overlap vector of length K.

    Component k is the best ``overlap(r, R_l) * max(0, score_l)`` over the
    anchor's detections, and 0 when the anchor never fires (empty list or
    all scores non-positive).
    """
    return geometric_embed_many(np.asarray(r.as_array())[None, :], dets, cfg)[0]


def geometric_embed_many(
    boxes: np.ndarray, dets: AnchorDetections, cfg: EmbeddingConfig
) -> np.ndarray:
    """Geometric embeddings for many query boxes at once, shape (n, K)."""
    boxes = np.asarray(boxes, dtype=float)
    n = boxes.shape[0]
    k = dets.n_anchors
    out = np.zeros((n, k))
    for ak, anchor_dets in enumerate(dets.per_anchor):
        gated = [(d.region, d.score) for d in anchor_dets if d.score > 0.0]
        if not gated:
            continue
        det_boxes = np.array([reg.as_array() for reg, _ in gated])
        det_scores = np.array([s for _, s in gated])
        overlaps = rho_pairs(boxes[:, None, :], det_boxes[None, :, :], cfg.overlap)
        out[:, ak] = np.max(overlaps * det_scores[None, :], axis=1)
    return out


def joint_embed(phi_a: np.ndarray, phi_g: np.ndarray) -> np.ndarray:
    """Kronecker product, appearance-major: entry ``i*K + k`` is ``a_i * g_k``."""
    phi_a = np.asarray(phi_a, dtype=float)
    phi_g = np.asarray(phi_g, dtype=float)
    if phi_a.size == 0 or phi_g.size == 0:
        raise ConfigError("joint_embed requires non-empty factors")
    return np.kron(phi_a, phi_g)


def embedding_dim(variant: str, d_a: int, k: int) -> int:
    """Output dimension of :func:`embed` for the variant."""
    if variant == "B":
        return d_a
    if variant == "B+C":
        return 2 * d_a
    if variant == "B+G":
        return d_a * k
    if variant == "B+C+G":
        return 2 * d_a * k
    raise ConfigError(f"unknown variant {variant!r}")


def _context_rows(record: ImageRecord, scale: float) -> np.ndarray:
    """Appearance rows standing in for each proposal's dilated context.

    Descriptors are precomputed per proposal, so the context of proposal i
    is the stored row of the proposal with maximum hard IoU to the dilated
    region.
    """
    boxes = record.proposal_boxes()
    ctx_boxes = np.array(
        [
            context_region(r, scale, record.width, record.height).as_array()
            for r in record.proposals
        ]
    )
    hard = OverlapConfig(mode="hard")
    ious = rho_pairs(ctx_boxes[:, None, :], boxes[None, :, :], hard)
    nearest = np.argmax(ious, axis=1)
    return record.descriptors[nearest]


def _appearance_matrix(record: ImageRecord, cfg: EmbeddingConfig) -> np.ndarray:
    if cfg.uses_context:
        return np.hstack([record.descriptors, _context_rows(record, cfg.context_scale)])
    return record.descriptors


def embed_all(
    record: ImageRecord, dets: AnchorDetections | None, cfg: EmbeddingConfig
) -> np.ndarray:
    """Embeddings of every proposal of one image, one row each.

    This is the bulk path used by training and detection; :func:`embed` is
    the single-region wrapper. Geometry variants need ``dets``.
    """
    app = _appearance_matrix(record, cfg)
    if not cfg.uses_geometry:
        return app
    if dets is None:
        raise ConfigError(f"variant {cfg.variant} requires anchor detections")
    geo = geometric_embed_many(record.proposal_boxes(), dets, cfg)
    # row-wise Kronecker product, appearance-major
    return (app[:, :, None] * geo[:, None, :]).reshape(record.n_proposals, -1)


def embed(
    store: DescriptorStore,
    image_id: str,
    r: Region,
    dets: AnchorDetections | None,
    cfg: EmbeddingConfig,
) -> np.ndarray:
    """Descriptor of one proposal region under the configured variant."""
    record = store[image_id]
    idx = record.find_proposal(r)
    app = _appearance_matrix(record, cfg)[idx]
    if not cfg.uses_geometry:
        return app
    if dets is None:
        raise ConfigError(f"variant {cfg.variant} requires anchor detections")
    geo = geometric_embed(r, dets, cfg)
    return joint_embed(app, geo)
