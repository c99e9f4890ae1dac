"""Assemble the navigable atlas: detected part boxes and best-match edges.

Every detected part box is linked to its most similar box in another
image under the L2-normalized joint appearance-geometry embedding, and
the similarity is decomposed into per-anchor contributions (the partial
inner products over each anchor's Kronecker block), which sum to the
total similarity.
"""

from __future__ import annotations

import numpy as np

from .anchors import AnchorBank, detect_anchors_all
from .embeddings import (
    DescriptorStore,
    EmbeddingConfig,
    geometric_embed_many,
)
from .fileio import AtlasEdge, AtlasGraph, AtlasNode
from .geometry import OverlapConfig
from .mil import EmbeddedDataset, PartModel, detect_part

__all__ = ["export_atlas", "anchor_contributions"]


def anchor_contributions(u: np.ndarray, v: np.ndarray, k: int) -> np.ndarray:
    """Per-anchor partial inner products of two appearance-major joint
    embeddings; they sum to ``u @ v`` exactly."""
    return np.einsum("ik,ik->k", u.reshape(-1, k), v.reshape(-1, k))


def export_atlas(
    models: dict[str, PartModel],
    bank: AnchorBank,
    store: DescriptorStore,
    image_ids: list[str] | None = None,
    top_edges: int = 1,
    boxes_per_image: int = 1,
    detect_nms_iou: float = 0.3,
    overlap: OverlapConfig | None = None,
    L: int = 5,
    anchor_nms_iou: float = 0.3,
    max_contributions: int = 10,
) -> AtlasGraph:
    """Detect part boxes with each model and link best cross-image matches.

    ``top_edges`` edges are emitted per detected box (0 disables edges;
    1 links each box to its single best match in any other image).
    """
    overlap = overlap or OverlapConfig()
    ids = image_ids if image_ids is not None else store.image_ids()
    dets = detect_anchors_all(bank, store, L=L, nms_iou=anchor_nms_iou)

    nodes: list[AtlasNode] = []
    box_embeddings: list[np.ndarray] = []  # normalized ag embedding per box
    box_owner: list[tuple[str, int]] = []  # (image id, box index in node)
    cfg_by_variant = {
        v: EmbeddingConfig(variant=v, overlap=overlap)
        for v in {m.variant for m in models.values()}
    }
    for image_id in ids:
        record = store[image_id]
        boxes = []
        geo = geometric_embed_many(
            record.proposal_boxes(), dets[image_id],
            EmbeddingConfig(variant="B+G", overlap=overlap),
        )
        for concept, model in sorted(models.items()):
            embedded = EmbeddedDataset.for_images(
                store, [image_id],
                dets if cfg_by_variant[model.variant].uses_geometry else None,
                cfg_by_variant[model.variant],
            )
            for region, score in detect_part(
                model, image_id, embedded, top_n=boxes_per_image, nms_iou=detect_nms_iou
            ):
                idx = record.find_proposal(region)
                ag = np.kron(record.descriptors[idx], geo[idx])
                norm = np.linalg.norm(ag)
                boxes.append(
                    {
                        "box": [region.x1, region.y1, region.x2, region.y2],
                        "concept": concept,
                        "score": float(score),
                    }
                )
                box_embeddings.append(ag / norm if norm > 0 else ag)
                box_owner.append((image_id, len(boxes) - 1))
        # each anchor's single best detection, for dashed-box overlays
        anchor_boxes = []
        for anchor_dets in dets[image_id].per_anchor:
            if anchor_dets:
                best = anchor_dets[0]
                anchor_boxes.append(
                    [best.region.x1, best.region.y1, best.region.x2, best.region.y2,
                     float(best.score)]
                )
            else:
                anchor_boxes.append([])
        nodes.append(
            AtlasNode(image_id=image_id, uri=record.uri, boxes=boxes, anchors=anchor_boxes)
        )

    edges: list[AtlasEdge] = []
    if top_edges > 0 and len(box_embeddings) > 1:
        emb = np.array(box_embeddings)
        sims = emb @ emb.T
        for i, (src_img, src_box) in enumerate(box_owner):
            order = np.argsort(-sims[i], kind="stable")
            taken = 0
            for j in order:
                if taken == top_edges:
                    break
                tgt_img, tgt_box = box_owner[j]
                if tgt_img == src_img:
                    continue  # cross-image navigation only
                contrib = anchor_contributions(emb[i], emb[j], bank.k)
                top = np.argsort(-contrib, kind="stable")[:max_contributions]
                edges.append(
                    AtlasEdge(
                        source_image=src_img,
                        source_box=src_box,
                        target_image=tgt_img,
                        target_box=tgt_box,
                        similarity=float(sims[i, j]),
                        contributions=[(int(k), float(contrib[k])) for k in top],
                    )
                )
                taken += 1
    graph = AtlasGraph(nodes=nodes, edges=edges, n_anchors=bank.k)
    graph.validate()
    return graph
