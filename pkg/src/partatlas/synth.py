"""Deterministic synthetic scene generator with planted ground truth.

Scenes are abstract: an image is a set of proposal boxes plus unit-norm
descriptors derived from planted pattern identities. Four scene kinds are
emitted:

* object scenes: a jittered object frame carrying anchor patterns and all
  parts at fixed frame-relative slots, plus an appearance twin of each
  part ("confuser") planted away from the object, so appearance alone
  cannot localize the part but anchor-relative geometry can;
* zoom scenes: one part fills most of the frame with no object context,
  exercising the dual nature of parts as objects in their own right;
* outlier scenes: positives that do not contain the part at all, modelling
  label noise in web-collected images;
* background scenes: the shared negative pool.

Everything is a pure function of the profile, including its seed, so a
regenerated dataset is byte-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .anchors import WeakImage, WeakImageSet
from .embeddings import DescriptorStore, ImageRecord, context_region
from .errors import ConfigError
from .evaldata import GroundTruth, GTBox
from .geometry import Region

__all__ = [
    "PartSpec",
    "AnchorSpec",
    "SyntheticProfile",
    "SyntheticDataset",
    "generate_synthetic",
    "standard_profile",
    "congruent_profile",
    "nested_extent_profile",
    "two_pattern_set",
]


@dataclass(frozen=True)
class PartSpec:
    """A part slot: centre offset and size relative to the object frame."""

    name: str
    offset: tuple[float, float]
    size: tuple[float, float]

    def __post_init__(self) -> None:
        ox, oy = self.offset
        w, h = self.size
        if not (w > 0 and h > 0):
            raise ConfigError(f"part {self.name!r}: size must be positive")
        if ox - w / 2 < 0 or ox + w / 2 > 1 or oy - h / 2 < 0 or oy + h / 2 > 1:
            raise ConfigError(f"part {self.name!r} does not fit inside the object frame")


@dataclass(frozen=True)
class AnchorSpec:
    offset: tuple[float, float]
    size: tuple[float, float]


_DEFAULT_PARTS = (
    PartSpec("part-a", offset=(0.36, 0.56), size=(0.30, 0.26)),
    PartSpec("part-b", offset=(0.70, 0.62), size=(0.24, 0.30)),
)

_DEFAULT_ANCHORS = (
    AnchorSpec(offset=(0.20, 0.20), size=(0.24, 0.24)),
    AnchorSpec(offset=(0.80, 0.20), size=(0.24, 0.24)),
    AnchorSpec(offset=(0.22, 0.82), size=(0.24, 0.22)),
    AnchorSpec(offset=(0.80, 0.84), size=(0.22, 0.22)),
)


@dataclass(frozen=True)
class SyntheticProfile:
    image_count: int = 200
    image_size: tuple[float, float] = (128.0, 128.0)
    parts: tuple[PartSpec, ...] = _DEFAULT_PARTS
    anchors: tuple[AnchorSpec, ...] = _DEFAULT_ANCHORS
    outlier_fraction: float = 0.2
    scale_jitter: float = 2.0
    noise_sigma: float = 0.08
    distractor_count: int = 4
    descriptor_dim: int = 24
    zoom_fraction: float = 0.25
    negative_fraction: float = 0.3
    confusers: bool = True
    nested_parts: bool = False
    congruent: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.outlier_fraction < 1.0:
            raise ConfigError(f"outlier fraction must be in [0, 1), got {self.outlier_fraction}")
        if self.scale_jitter < 1.0:
            raise ConfigError(f"scale_jitter must be >= 1, got {self.scale_jitter}")
        if self.noise_sigma < 0.0:
            raise ConfigError("noise_sigma must be >= 0")
        if not self.parts:
            raise ConfigError("profile needs at least one part")
        if self.image_count < 8:
            raise ConfigError("image_count must be at least 8")
        needed = 3 + len(self.anchors) + 2 * len(self.parts) + (len(self.parts) if self.nested_parts else 0)
        if self.descriptor_dim < needed:
            raise ConfigError(
                f"descriptor_dim {self.descriptor_dim} too small for {needed} planted patterns"
            )


def standard_profile(seed: int = 0, image_count: int = 200) -> SyntheticProfile:
    """The desk-scale benchmark profile: outliers, scale jitter, confusers."""
    return SyntheticProfile(image_count=image_count, seed=seed)


def congruent_profile(seed: int = 0, image_count: int = 24) -> SyntheticProfile:
    """Noise-free similarity-transformed copies of one layout, for matching."""
    return SyntheticProfile(
        image_count=image_count,
        outlier_fraction=0.0,
        zoom_fraction=0.0,
        noise_sigma=0.0,
        distractor_count=3,
        congruent=True,
        seed=seed,
    )


def nested_extent_profile(seed: int = 0, image_count: int = 80) -> SyntheticProfile:
    """Ambiguous part extent: two nested plausible boxes per part."""
    return SyntheticProfile(
        image_count=image_count,
        parts=(PartSpec("part-a", offset=(0.45, 0.5), size=(0.46, 0.44)),),
        outlier_fraction=0.0,
        zoom_fraction=0.15,
        confusers=False,
        nested_parts=True,
        seed=seed,
    )


@dataclass
class _PatternBank:
    """Orthonormal identity vectors for every planted pattern."""

    background: np.ndarray
    scene: np.ndarray
    context_bg: np.ndarray
    anchors: np.ndarray
    parts: dict[str, np.ndarray]
    part_contexts: dict[str, np.ndarray]
    part_outer: dict[str, np.ndarray]


def _make_patterns(profile: SyntheticProfile, rng: np.random.Generator) -> _PatternBank:
    count = 3 + len(profile.anchors) + 2 * len(profile.parts)
    if profile.nested_parts:
        count += len(profile.parts)
    m = rng.standard_normal((profile.descriptor_dim, count))
    q, _ = np.linalg.qr(m)
    cols = iter(q.T)
    background = next(cols)
    scene = next(cols)
    context_bg = next(cols)
    anchors = np.array([next(cols) for _ in profile.anchors])
    parts = {p.name: next(cols) for p in profile.parts}
    part_contexts = {p.name: next(cols) for p in profile.parts}
    part_outer = {}
    if profile.nested_parts:
        part_outer = {p.name: next(cols) for p in profile.parts}
    return _PatternBank(background, scene, context_bg, anchors, parts, part_contexts, part_outer)


@dataclass
class SyntheticDataset:
    """Generated scenes plus the oracle knowledge of what was planted."""

    profile: SyntheticProfile
    store: DescriptorStore
    gt: GroundTruth
    concepts: tuple[str, ...]
    labels: dict[str, dict[str, int]]
    scene_types: dict[str, str]
    outliers: set[str]
    planted: dict[str, dict[str, int]]
    planted_outer: dict[str, dict[str, int]] = field(default_factory=dict)

    def weak_set(self, concept: str) -> WeakImageSet:
        """The MIL bag structure for one concept."""
        items = [
            WeakImage(image_id, label)
            for image_id, label in sorted(self.labels[concept].items())
        ]
        return WeakImageSet(items, self.store)

    def anchor_weak_set(self) -> WeakImageSet:
        """Anchor-training bags: all part-bearing scenes versus background."""
        items = []
        for image_id in sorted(self.scene_types):
            kind = self.scene_types[image_id]
            items.append(WeakImage(image_id, -1 if kind == "background" else 1))
        return WeakImageSet(items, self.store)

    def positive_ids(self, concept: str) -> list[str]:
        return sorted(i for i, y in self.labels[concept].items() if y == 1)

    def clean_positive_ids(self, concept: str) -> list[str]:
        return [i for i in self.positive_ids(concept) if i not in self.outliers]

    def object_scene_ids(self) -> list[str]:
        return sorted(i for i, k in self.scene_types.items() if k == "object")


class _SceneBuilder:
    def __init__(self, profile: SyntheticProfile, patterns: _PatternBank, rng: np.random.Generator):
        self.profile = profile
        self.patterns = patterns
        self.rng = rng
        self.w, self.h = profile.image_size

    def descriptor(self, base: np.ndarray) -> np.ndarray:
        v = base + self.profile.noise_sigma * self.rng.standard_normal(base.shape)
        return v / np.linalg.norm(v)

    def whole_image(self) -> Region:
        return Region(0.0, 0.0, self.w, self.h)

    def global_descriptor(self, extra: np.ndarray | None = None) -> np.ndarray:
        # every photo's global appearance is mostly its own: a weak shared
        # scene component plus a per-image gist, so no linear direction can
        # score all whole-image boxes high at once
        base = 0.3 * self.patterns.scene + self.rng.standard_normal(
            self.patterns.scene.shape
        ) / np.sqrt(self.patterns.scene.shape[0])
        if extra is not None:
            base = base + extra
        return self.descriptor(base / np.linalg.norm(base))

    def frame_box(self, frame: Region, offset: tuple[float, float], size: tuple[float, float]) -> Region:
        cx = frame.x1 + offset[0] * frame.width
        cy = frame.y1 + offset[1] * frame.height
        hw = 0.5 * size[0] * frame.width
        hh = 0.5 * size[1] * frame.height
        return Region(
            max(cx - hw, 0.0), max(cy - hh, 0.0), min(cx + hw, self.w), min(cy + hh, self.h)
        )

    def random_box(self, min_side: float = 6.0, max_side: float = 40.0) -> Region:
        bw = self.rng.uniform(min_side, max_side)
        bh = self.rng.uniform(min_side, max_side)
        x1 = self.rng.uniform(0.0, self.w - bw)
        y1 = self.rng.uniform(0.0, self.h - bh)
        return Region(x1, y1, x1 + bw, y1 + bh)

    def sample_frame(self) -> Region:
        base = 0.8 * min(self.w, self.h)
        if self.profile.congruent:
            scale = self.rng.uniform(1.0 / self.profile.scale_jitter, 1.0)
        else:
            scale = self.rng.uniform(1.0 / self.profile.scale_jitter, 1.0)
        side = base * scale
        x1 = self.rng.uniform(0.0, self.w - side)
        y1 = self.rng.uniform(0.0, self.h - side)
        return Region(x1, y1, x1 + side, y1 + side)

    def confuser_slot(self, frame: Region, part_box: Region) -> Region:
        """A box of the part's size away from the object frame (and the part)."""
        bw, bh = part_box.width, part_box.height
        if self.profile.congruent:
            # fixed frame-relative slot left of the frame, clipped into the image
            cx = frame.x1 - 0.35 * frame.width
            cy = frame.y1 + 0.25 * frame.height
            x1 = min(max(cx - bw / 2, 0.0), self.w - bw)
            y1 = min(max(cy - bh / 2, 0.0), self.h - bh)
            return Region(x1, y1, x1 + bw, y1 + bh)
        for _ in range(64):
            x1 = self.rng.uniform(0.0, self.w - bw)
            y1 = self.rng.uniform(0.0, self.h - bh)
            cand = Region(x1, y1, x1 + bw, y1 + bh)
            if cand.intersection_area(frame) / cand.area < 0.05:
                return cand
        for _ in range(64):
            x1 = self.rng.uniform(0.0, self.w - bw)
            y1 = self.rng.uniform(0.0, self.h - bh)
            cand = Region(x1, y1, x1 + bw, y1 + bh)
            if cand.intersection_area(part_box) / cand.area < 0.05:
                return cand
        return Region(0.0, 0.0, bw, bh)


def generate_synthetic(profile: SyntheticProfile) -> SyntheticDataset:
    """Build the full dataset for a profile; deterministic from its seed."""
    rng = np.random.default_rng(profile.seed)
    patterns = _make_patterns(profile, rng)
    builder = _SceneBuilder(profile, patterns, rng)
    part_names = tuple(p.name for p in profile.parts)

    n_total = profile.image_count
    n_parts = len(part_names)
    n_bg = max(2, round(profile.negative_fraction * n_total))
    remaining = n_total - n_bg
    n_zoom_each = max(1, round(profile.zoom_fraction * remaining / n_parts)) if profile.zoom_fraction > 0 else 0
    f = profile.outlier_fraction
    # solve object count so each concept's bag is a fraction f outliers:
    # out = f/(1-f) * (obj + zoom), obj + parts*(zoom + out) = remaining
    if f > 0:
        ratio = f / (1.0 - f)
        n_obj = round((remaining - n_parts * n_zoom_each * (1.0 + ratio)) / (1.0 + n_parts * ratio))
        n_out_each = round(ratio * (n_obj + n_zoom_each))
    else:
        n_obj = remaining - n_parts * n_zoom_each
        n_out_each = 0
    if n_obj < 2:
        raise ConfigError("profile leaves fewer than two object scenes; reduce fractions")

    records: list[ImageRecord] = []
    gt = GroundTruth(vocabulary=part_names)
    labels: dict[str, dict[str, int]] = {c: {} for c in part_names}
    scene_types: dict[str, str] = {}
    outliers: set[str] = set()
    planted: dict[str, dict[str, int]] = {}
    planted_outer: dict[str, dict[str, int]] = {}

    counter = 0

    def next_id(kind: str) -> str:
        nonlocal counter
        counter += 1
        return f"img-{counter:04d}-{kind}"

    def add_record(image_id: str, proposals: list[Region], descs: list[np.ndarray]) -> None:
        records.append(
            ImageRecord(
                image_id=image_id,
                width=builder.w,
                height=builder.h,
                proposals=tuple(proposals),
                descriptors=np.array(descs),
            )
        )

    def object_scene() -> None:
        image_id = next_id("obj")
        scene_types[image_id] = "object"
        frame = builder.sample_frame()
        proposals = [builder.whole_image()]
        descs = [builder.global_descriptor()]
        for ai, spec in enumerate(profile.anchors):
            proposals.append(builder.frame_box(frame, spec.offset, spec.size))
            descs.append(builder.descriptor(patterns.anchors[ai]))
        planted[image_id] = {}
        planted_outer[image_id] = {}
        part_boxes = {
            p.name: builder.frame_box(frame, p.offset, p.size) for p in profile.parts
        }
        if profile.confusers:
            for p in profile.parts:
                slot = builder.confuser_slot(frame, part_boxes[p.name])
                proposals.append(slot)
                descs.append(builder.descriptor(patterns.parts[p.name]))
                proposals.append(context_region(slot, 2.0, builder.w, builder.h))
                descs.append(builder.descriptor(patterns.background))
        for p in profile.parts:
            box = part_boxes[p.name]
            planted[image_id][p.name] = len(proposals)
            proposals.append(box)
            if profile.nested_parts:
                # each photo reads more cleanly at one of the two extents, so
                # extent ambiguity is decided per image, not by the optimizer
                favour_inner = bool(rng.integers(2))

                def blurred(base: np.ndarray) -> np.ndarray:
                    # the less plausible extent reads partly as background, a
                    # penalty that scales with whatever weights MIL learns
                    noise = rng.standard_normal(base.shape)
                    v = base + 0.5 * patterns.background + 0.25 * noise / np.linalg.norm(noise)
                    return v / np.linalg.norm(v)

                inner_base = patterns.parts[p.name]
                descs.append(
                    builder.descriptor(inner_base if favour_inner else blurred(inner_base))
                )
                outer = builder.frame_box(
                    frame, p.offset, (min(p.size[0] * 1.9, 1.0), min(p.size[1] * 1.9, 1.0))
                )
                outer_base = patterns.part_outer[p.name]
                planted_outer[image_id][p.name] = len(proposals)
                proposals.append(outer)
                descs.append(
                    builder.descriptor(blurred(outer_base) if favour_inner else outer_base)
                )
            else:
                descs.append(builder.descriptor(patterns.parts[p.name]))
            proposals.append(context_region(box, 2.0, builder.w, builder.h))
            descs.append(builder.descriptor(patterns.part_contexts[p.name]))
            gt.add(image_id, GTBox(p.name, box))
        for _ in range(profile.distractor_count):
            proposals.append(builder.random_box())
            descs.append(builder.descriptor(patterns.background))
        add_record(image_id, proposals, descs)
        for c in part_names:
            labels[c][image_id] = 1

    def zoom_scene(part: PartSpec) -> None:
        image_id = next_id(f"zoom-{part.name}")
        scene_types[image_id] = f"zoom:{part.name}"
        side_frac = rng.uniform(0.74, 0.88)
        aspect = part.size[0] / part.size[1]
        if aspect >= 1.0:
            bw = side_frac * builder.w
            bh = bw / aspect
        else:
            bh = side_frac * builder.h
            bw = bh * aspect
        cx = builder.w / 2 + rng.uniform(-0.04, 0.04) * builder.w
        cy = builder.h / 2 + rng.uniform(-0.04, 0.04) * builder.h
        box = Region(
            max(cx - bw / 2, 0.0),
            max(cy - bh / 2, 0.0),
            min(cx + bw / 2, builder.w),
            min(cy + bh / 2, builder.h),
        )
        # a zoomed photo's global appearance is dominated by the part itself;
        # with nested extents both readings are in view, so the gist is neutral
        if profile.nested_parts:
            tint = (patterns.parts[part.name] + patterns.part_outer[part.name]) / np.sqrt(2.0)
        else:
            tint = patterns.parts[part.name]
        proposals = [builder.whole_image()]
        descs = [builder.global_descriptor(extra=1.1 * tint)]
        planted[image_id] = {part.name: len(proposals)}
        planted_outer[image_id] = {}
        proposals.append(box)
        descs.append(builder.descriptor(patterns.parts[part.name]))
        if profile.nested_parts:
            inner = Region(
                box.x1 + 0.25 * box.width,
                box.y1 + 0.25 * box.height,
                box.x2 - 0.25 * box.width,
                box.y2 - 0.25 * box.height,
            )
            # zoomed scenes show the inner extent as the part, outer as the frame
            planted_outer[image_id][part.name] = planted[image_id][part.name]
            planted[image_id][part.name] = len(proposals)
            descs[-1] = builder.descriptor(patterns.part_outer[part.name])
            proposals.append(inner)
            descs.append(builder.descriptor(patterns.parts[part.name]))
            gt.add(image_id, GTBox(part.name, inner))
        else:
            gt.add(image_id, GTBox(part.name, box))
        # the dilated context of a zoomed part is dominated by the part itself
        proposals.append(context_region(box, 2.0, builder.w, builder.h))
        descs.append(builder.descriptor(patterns.parts[part.name]))
        for _ in range(profile.distractor_count):
            proposals.append(builder.random_box())
            descs.append(builder.descriptor(patterns.background))
        add_record(image_id, proposals, descs)
        labels[part.name][image_id] = 1
        for other in part_names:
            if other != part.name:
                labels[other][image_id] = -1

    def outlier_scene(part: PartSpec) -> None:
        image_id = next_id(f"out-{part.name}")
        scene_types[image_id] = f"outlier:{part.name}"
        outliers.add(image_id)
        planted[image_id] = {}
        planted_outer[image_id] = {}
        proposals = [builder.whole_image()]
        descs = [builder.global_descriptor()]
        for _ in range(max(profile.distractor_count, 3)):
            proposals.append(builder.random_box())
            descs.append(builder.descriptor(patterns.background))
        add_record(image_id, proposals, descs)
        labels[part.name][image_id] = 1

    # every background scene carries a weak lookalike of each anchor and a
    # sampled context/part lookalike: no non-part pattern is cleanly
    # discriminative, and parts pay enough that geometry must carry margins
    ctx_leaks = [patterns.part_contexts[c] for c in part_names]
    part_leaks = [patterns.parts[c] for c in part_names]
    if profile.nested_parts:
        part_leaks += [patterns.part_outer[c] for c in part_names]

    def background_scene() -> None:
        image_id = next_id("bg")
        scene_types[image_id] = "background"
        planted[image_id] = {}
        planted_outer[image_id] = {}
        proposals = [builder.whole_image()]
        descs = [builder.global_descriptor()]
        for _ in range(max(profile.distractor_count, 3)):
            proposals.append(builder.random_box())
            descs.append(builder.descriptor(patterns.background))
        # weak lookalikes of anchors and part surroundings: background clutter
        # keeps every non-part pattern from being cleanly discriminative while
        # staying far enough below full strength for anchor training
        picks = list(patterns.anchors)
        picks.append(ctx_leaks[int(rng.integers(len(ctx_leaks)))])
        picks.append(part_leaks[int(rng.integers(len(part_leaks)))])
        for base in picks:
            v = 0.5 * base + 0.87 * builder.rng.standard_normal(base.shape) / np.sqrt(base.shape[0])
            proposals.append(builder.random_box())
            descs.append(builder.descriptor(v / np.linalg.norm(v)))
        add_record(image_id, proposals, descs)
        for c in part_names:
            labels[c][image_id] = -1

    for _ in range(n_obj):
        object_scene()
    for p in profile.parts:
        for _ in range(n_zoom_each):
            zoom_scene(p)
    for p in profile.parts:
        for _ in range(n_out_each):
            outlier_scene(p)
    for _ in range(n_bg):
        background_scene()

    store = DescriptorStore(records)
    return SyntheticDataset(
        profile=profile,
        store=store,
        gt=gt,
        concepts=part_names,
        labels=labels,
        scene_types=scene_types,
        outliers=outliers,
        planted=planted,
        planted_outer=planted_outer,
    )


def two_pattern_set(
    seed: int = 0,
    n_pos: int = 30,
    n_neg: int = 30,
    descriptor_dim: int = 16,
    dominant_multiplicity: int = 5,
    cluster_sigma: float = 0.08,
) -> tuple[WeakImageSet, np.ndarray, np.ndarray]:
    """A planted two-pattern instance for anchor diversity experiments.

    Positive images carry ``dominant_multiplicity`` noisy variants of the
    first pattern and a single clean second pattern, so the first pattern
    is the most discriminative one. Background clutter (negative images
    and the positives' distractor) spans the orthogonal complement of the
    two patterns: an anchor pointing anywhere outside their span fires on
    negatives and is pushed back, which keeps the patterns themselves the
    only stable detector directions. Returns the weak set and the two
    planted unit patterns.
    """
    rng = np.random.default_rng(seed)
    m = rng.standard_normal((descriptor_dim, 2))
    q, _ = np.linalg.qr(m)
    p1, p2 = q[:, 0], q[:, 1]
    span = np.stack([p1, p2])

    def unit(v: np.ndarray) -> np.ndarray:
        return v / np.linalg.norm(v)

    def clutter() -> np.ndarray:
        v = rng.standard_normal(descriptor_dim)
        v -= span.T @ (span @ v)
        return unit(v)

    def box(i: int) -> Region:
        return Region(10.0 * i, 0.0, 10.0 * i + 8.0, 8.0)

    records = []
    items = []
    for i in range(n_pos):
        descs = [
            unit(p1 + cluster_sigma * rng.standard_normal(descriptor_dim))
            for _ in range(dominant_multiplicity)
        ]
        descs.append(unit(p2 + 0.02 * rng.standard_normal(descriptor_dim)))
        descs.append(clutter())
        image_id = f"pos-{i:03d}"
        records.append(
            ImageRecord(
                image_id, 100.0, 10.0,
                tuple(box(j) for j in range(len(descs))), np.array(descs),
            )
        )
        items.append(WeakImage(image_id, 1))
    for i in range(n_neg):
        descs = [clutter() for _ in range(8)]
        image_id = f"neg-{i:03d}"
        records.append(
            ImageRecord(
                image_id, 100.0, 10.0,
                tuple(box(j) for j in range(len(descs))), np.array(descs),
            )
        )
        items.append(WeakImage(image_id, -1))
    return WeakImageSet(items, DescriptorStore(records)), p1, p2
