"""File formats: dataset manifests, descriptor binaries, models, banks, atlas.

Descriptor matrices use a tiny binary container (magic ``AMIL``, u32
version, u32 rows, u32 cols, little-endian float32 row-major). Everything
else is versioned JSON, human-inspectable and diff-able. Loaders reject
unknown versions loudly and name the offending file in every error.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .anchors import AnchorBank, AnchorHyperParams, WeakImage, WeakImageSet
from .embeddings import DescriptorStore, ImageRecord
from .errors import DataError
from .evaldata import GroundTruth, GTBox
from .geometry import Region
from .mil import MilConfig, PartModel, RoundLog

__all__ = [
    "DESCRIPTOR_MAGIC",
    "FORMAT_VERSION",
    "save_descriptors",
    "load_descriptors",
    "save_proposals",
    "load_proposals",
    "save_dataset",
    "load_dataset",
    "save_bank",
    "load_bank",
    "save_model",
    "load_model",
    "AtlasNode",
    "AtlasEdge",
    "AtlasGraph",
    "save_atlas",
    "load_atlas",
]

DESCRIPTOR_MAGIC = b"AMIL"
FORMAT_VERSION = 1

_UNIT_NORM_TOL = 1e-4


def save_descriptors(path: str | Path, matrix: np.ndarray) -> None:
    """Write a float matrix in the binary descriptor layout."""
    matrix = np.asarray(matrix, dtype="<f4")
    if matrix.ndim != 2:
        raise DataError(f"{path}: descriptor matrix must be 2-D")
    with open(path, "wb") as f:
        f.write(DESCRIPTOR_MAGIC)
        f.write(struct.pack("<III", FORMAT_VERSION, matrix.shape[0], matrix.shape[1]))
        f.write(matrix.tobytes(order="C"))


def load_descriptors(path: str | Path) -> np.ndarray:
    """Read a binary descriptor matrix; errors name the file."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != DESCRIPTOR_MAGIC:
            raise DataError(f"{path}: bad magic {magic!r}, expected {DESCRIPTOR_MAGIC!r}")
        header = f.read(12)
        if len(header) != 12:
            raise DataError(f"{path}: truncated header")
        version, rows, cols = struct.unpack("<III", header)
        if version != FORMAT_VERSION:
            raise DataError(f"{path}: unsupported descriptor version {version}")
        payload = f.read()
    expected = rows * cols * 4
    if len(payload) != expected:
        raise DataError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype="<f4").reshape(rows, cols).astype(float)


def save_proposals(path: str | Path, proposals: tuple[Region, ...]) -> None:
    payload = {
        "version": FORMAT_VERSION,
        "boxes": [[r.x1, r.y1, r.x2, r.y2] for r in proposals],
    }
    Path(path).write_text(json.dumps(payload))


def load_proposals(path: str | Path) -> tuple[Region, ...]:
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc
    _check_version(path, payload)
    return tuple(Region(*box) for box in payload["boxes"])


def _check_version(path: str | Path, payload: dict) -> None:
    version = payload.get("version")
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported format version {version!r}")


def save_dataset(
    directory: str | Path,
    store: DescriptorStore,
    labels: dict[str, dict[str, int]],
    gt: GroundTruth | None = None,
    meta: dict[str, dict] | None = None,
) -> Path:
    """Write a manifest plus per-image proposal/descriptor files.

    Returns the manifest path. ``labels`` maps concept -> image id -> +-1;
    images missing from a concept's map are 'absent' for it.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    images = []
    for record in store.records():
        stem = record.image_id
        prop_file = f"{stem}.proposals.json"
        desc_file = f"{stem}.desc.bin"
        save_proposals(directory / prop_file, record.proposals)
        save_descriptors(directory / desc_file, record.descriptors)
        entry = {
            "id": record.image_id,
            "width": record.width,
            "height": record.height,
            "proposals": prop_file,
            "descriptors": desc_file,
            "labels": {
                c: by_img[record.image_id]
                for c, by_img in labels.items()
                if record.image_id in by_img
            },
        }
        if record.uri is not None:
            entry["uri"] = record.uri
        if gt is not None:
            boxes = gt.boxes(record.image_id)
            if boxes:
                entry["gt"] = [
                    {
                        "concept": b.concept,
                        "box": [b.region.x1, b.region.y1, b.region.x2, b.region.y2],
                        "difficult": b.difficult,
                        "truncated": b.truncated,
                    }
                    for b in boxes
                ]
        if meta and record.image_id in meta:
            entry["meta"] = meta[record.image_id]
        images.append(entry)
    manifest = {
        "version": FORMAT_VERSION,
        "concepts": sorted(labels),
        "images": images,
    }
    manifest_path = directory / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2))
    return manifest_path


@dataclass
class LoadedDataset:
    store: DescriptorStore
    labels: dict[str, dict[str, int]]
    concepts: tuple[str, ...]
    gt: GroundTruth | None
    meta: dict[str, dict]

    def weak_set(self, concept: str) -> WeakImageSet:
        if concept not in self.labels:
            raise DataError(f"unknown concept {concept!r}; manifest has {self.concepts}")
        items = [
            WeakImage(i, y) for i, y in sorted(self.labels[concept].items())
        ]
        return WeakImageSet(items, self.store)


def load_dataset(manifest_path: str | Path) -> LoadedDataset:
    """Load and validate a dataset manifest and its referenced files.

    Descriptor rows more than 1e-4 off unit norm are renormalized with a
    warning; zero rows are rejected.
    """
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except FileNotFoundError:
        raise DataError(f"{manifest_path}: no such manifest") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{manifest_path}: invalid JSON ({exc})") from exc
    _check_version(manifest_path, manifest)
    base = manifest_path.parent
    concepts = tuple(manifest.get("concepts", []))
    records = []
    labels: dict[str, dict[str, int]] = {c: {} for c in concepts}
    gt = GroundTruth(vocabulary=concepts)
    any_gt = False
    meta: dict[str, dict] = {}
    seen: set[str] = set()
    for entry in manifest["images"]:
        image_id = entry["id"]
        if image_id in seen:
            raise DataError(f"{manifest_path}: duplicate image id {image_id!r}")
        seen.add(image_id)
        prop_path = base / entry["proposals"]
        desc_path = base / entry["descriptors"]
        if not prop_path.exists():
            raise DataError(f"image {image_id!r}: missing proposal file {prop_path}")
        if not desc_path.exists():
            raise DataError(f"image {image_id!r}: missing descriptor file {desc_path}")
        proposals = load_proposals(prop_path)
        descriptors = load_descriptors(desc_path)
        if descriptors.shape[0] != len(proposals):
            raise DataError(
                f"image {image_id!r}: {len(proposals)} proposals but "
                f"{descriptors.shape[0]} descriptor rows"
            )
        norms = np.linalg.norm(descriptors, axis=1)
        if np.any(norms == 0.0):
            raise DataError(f"image {image_id!r}: zero descriptor row")
        if np.any(np.abs(norms - 1.0) > _UNIT_NORM_TOL):
            import logging

            logging.getLogger(__name__).warning(
                "image %r: renormalizing %d off-unit descriptor rows",
                image_id,
                int(np.sum(np.abs(norms - 1.0) > _UNIT_NORM_TOL)),
            )
            descriptors = descriptors / norms[:, None]
        records.append(
            ImageRecord(
                image_id=image_id,
                width=float(entry["width"]),
                height=float(entry["height"]),
                proposals=proposals,
                descriptors=descriptors,
                uri=entry.get("uri"),
            )
        )
        for concept, y in entry.get("labels", {}).items():
            if concept not in labels:
                raise DataError(f"image {image_id!r}: label for unknown concept {concept!r}")
            labels[concept][image_id] = int(y)
        for g in entry.get("gt", []):
            gt.add(
                image_id,
                GTBox(
                    g["concept"],
                    Region(*g["box"]),
                    bool(g.get("difficult", False)),
                    bool(g.get("truncated", False)),
                ),
            )
            any_gt = True
        if "meta" in entry:
            meta[image_id] = entry["meta"]
    store = DescriptorStore(records)
    return LoadedDataset(
        store=store,
        labels=labels,
        concepts=concepts,
        gt=gt if any_gt else None,
        meta=meta,
    )


def save_bank(path: str | Path, bank: AnchorBank) -> None:
    payload = {
        "version": FORMAT_VERSION,
        "kind": "anchor-bank",
        "weights": bank.weights.tolist(),
        "hyper": asdict(bank.hyper),
        "training_log": [[step, value] for step, value in bank.training_log],
        "skipped_images": bank.skipped_images,
    }
    Path(path).write_text(json.dumps(payload))


def load_bank(path: str | Path) -> AnchorBank:
    payload = _load_json(path, expected_kind="anchor-bank")
    return AnchorBank(
        weights=np.array(payload["weights"], dtype=float),
        hyper=AnchorHyperParams(**payload["hyper"]),
        training_log=[(int(s), float(v)) for s, v in payload["training_log"]],
        skipped_images=int(payload.get("skipped_images", 0)),
    )


def _load_json(path: str | Path, expected_kind: str) -> dict:
    try:
        payload = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise DataError(f"{path}: no such file") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc
    _check_version(path, payload)
    kind = payload.get("kind")
    if kind != expected_kind:
        raise DataError(f"{path}: expected a {expected_kind} file, found {kind!r}")
    return payload


def _overlap_to_dict(cfg) -> dict:
    return {
        "mode": cfg.mode,
        "alpha": cfg.alpha,
        "quadrature_nodes": cfg.quadrature_nodes,
        "support_pad": cfg.support_pad,
    }


def save_model(path: str | Path, model: PartModel) -> None:
    cfg = model.config
    payload = {
        "version": FORMAT_VERSION,
        "kind": "part-model",
        "variant": model.variant,
        "w": model.w.tolist(),
        "lam": model.lam,
        "d_a": model.d_a,
        "n_anchors": model.n_anchors,
        "config": {
            "lam": cfg.lam,
            "appearance_rounds": cfg.appearance_rounds,
            "joint_rounds": cfg.joint_rounds,
            "epochs": cfg.epochs,
            "base_lr": cfg.base_lr,
            "seed": cfg.seed,
            "overlap": _overlap_to_dict(cfg.overlap),
            "context_scale": cfg.context_scale,
            "detections_per_anchor": cfg.detections_per_anchor,
            "anchor_nms_iou": cfg.anchor_nms_iou,
        },
        "training_log": [
            [r.round_index, r.phase, r.objective, r.changed] for r in model.training_log
        ],
        "final_selections": model.final_selections,
    }
    Path(path).write_text(json.dumps(payload))


def load_model(path: str | Path) -> PartModel:
    from .geometry import OverlapConfig

    payload = _load_json(path, expected_kind="part-model")
    cfg_raw = dict(payload["config"])
    overlap = OverlapConfig(**cfg_raw.pop("overlap"))
    cfg = MilConfig(overlap=overlap, **cfg_raw)
    return PartModel(
        w=np.array(payload["w"], dtype=float),
        variant=payload["variant"],
        lam=float(payload["lam"]),
        d_a=int(payload["d_a"]),
        n_anchors=int(payload["n_anchors"]),
        config=cfg,
        training_log=[
            RoundLog(int(a), str(b), float(c), int(d))
            for a, b, c, d in payload["training_log"]
        ],
        final_selections={k: int(v) for k, v in payload.get("final_selections", {}).items()},
    )


@dataclass
class AtlasNode:
    image_id: str
    uri: str | None
    boxes: list[dict]  # {"box": [x1,y1,x2,y2], "concept": str, "score": float}
    anchors: list[list[float]] = field(default_factory=list)  # per anchor: [x1,y1,x2,y2,score]


@dataclass
class AtlasEdge:
    source_image: str
    source_box: int
    target_image: str
    target_box: int
    similarity: float
    contributions: list[tuple[int, float]]  # (anchor id, partial inner product)


@dataclass
class AtlasGraph:
    nodes: list[AtlasNode]
    edges: list[AtlasEdge]
    n_anchors: int = 0

    def node_index(self) -> dict[str, AtlasNode]:
        return {n.image_id: n for n in self.nodes}

    def validate(self) -> None:
        index = self.node_index()
        if len(index) != len(self.nodes):
            raise DataError("atlas has duplicate node image ids")
        for e in self.edges:
            for img, box in ((e.source_image, e.source_box), (e.target_image, e.target_box)):
                if img not in index:
                    raise DataError(f"atlas edge references unknown image {img!r}")
                if not 0 <= box < len(index[img].boxes):
                    raise DataError(f"atlas edge references box {box} of image {img!r}")
            values = [v for _, v in e.contributions]
            if any(a < b for a, b in zip(values, values[1:])):
                raise DataError("atlas edge contributions must be sorted descending")
            if len(e.contributions) > 10:
                raise DataError("atlas edge stores more than 10 contributions")


def save_atlas(path: str | Path, atlas: AtlasGraph) -> None:
    atlas.validate()
    payload = {
        "version": FORMAT_VERSION,
        "kind": "atlas-graph",
        "n_anchors": atlas.n_anchors,
        "nodes": [
            {"id": n.image_id, "uri": n.uri, "boxes": n.boxes, "anchors": n.anchors}
            for n in atlas.nodes
        ],
        "edges": [
            {
                "source": {"image": e.source_image, "box": e.source_box},
                "target": {"image": e.target_image, "box": e.target_box},
                "similarity": e.similarity,
                "contributions": [[int(a), float(v)] for a, v in e.contributions],
            }
            for e in atlas.edges
        ],
    }
    Path(path).write_text(json.dumps(payload, indent=2))


def load_atlas(path: str | Path) -> AtlasGraph:
    payload = _load_json(path, expected_kind="atlas-graph")
    atlas = AtlasGraph(
        nodes=[
            AtlasNode(
                image_id=n["id"],
                uri=n.get("uri"),
                boxes=list(n["boxes"]),
                anchors=[list(a) for a in n.get("anchors", [])],
            )
            for n in payload["nodes"]
        ],
        edges=[
            AtlasEdge(
                source_image=e["source"]["image"],
                source_box=int(e["source"]["box"]),
                target_image=e["target"]["image"],
                target_box=int(e["target"]["box"]),
                similarity=float(e["similarity"]),
                contributions=[(int(a), float(v)) for a, v in e["contributions"]],
            )
            for e in payload["edges"]
        ],
        n_anchors=int(payload.get("n_anchors", 0)),
    )
    atlas.validate()
    return atlas
