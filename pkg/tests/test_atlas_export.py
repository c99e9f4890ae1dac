import json
from pathlib import Path

import numpy as np
import pytest

from partatlas.anchors import AnchorHyperParams, detect_anchors_all, train_anchors
from partatlas.atlas import anchor_contributions, export_atlas
from partatlas.fileio import save_atlas
from partatlas.geometry import Region, iou
from partatlas.mil import MilConfig, train_part
from partatlas.synth import SyntheticProfile, generate_synthetic

FIXTURE = Path(__file__).parent.parent / "frontend" / "test" / "fixtures" / "congruent_atlas.json"


def fixture_profile() -> SyntheticProfile:
    """Deterministic recipe behind the committed viewer fixture."""
    return SyntheticProfile(
        image_count=36, outlier_fraction=0.0, zoom_fraction=0.35, noise_sigma=0.08,
        distractor_count=3, confusers=False, congruent=True, seed=0,
    )


@pytest.fixture(scope="module")
def congruent_atlas(tmp_path_factory):
    ds = generate_synthetic(fixture_profile())
    bank = train_anchors(
        ds.anchor_weak_set(),
        AnchorHyperParams(k=8, lam=0.05, gamma=1.0, learning_rate=0.02,
                          iterations=2500, seed=0, log_every=0),
    )
    dets = detect_anchors_all(bank, ds.store, L=5, nms_iou=0.3)
    models = {
        c: train_part(ds.weak_set(c), "B+C+G", anchors=bank, cfg=MilConfig(lam=0.01), dets=dets)
        for c in ds.concepts
    }
    graph = export_atlas(models, bank, ds.store, image_ids=ds.object_scene_ids(), top_edges=1)
    path = tmp_path_factory.mktemp("atlas") / "atlas.json"
    save_atlas(path, graph)
    return ds, graph, path


class TestExportAtlas:
    def test_edges_point_to_counterpart_boxes(self, congruent_atlas):
        ds, graph, _ = congruent_atlas
        nodes = {n.image_id: n for n in graph.nodes}
        assert graph.edges
        for e in graph.edges:
            src = nodes[e.source_image].boxes[e.source_box]
            tgt = nodes[e.target_image].boxes[e.target_box]
            assert src["concept"] == tgt["concept"]
            gt_boxes = ds.gt.boxes(e.target_image, src["concept"])
            assert max(iou(Region(*tgt["box"]), b.region) for b in gt_boxes) >= 0.8

    def test_contributions_sum_to_similarity(self, congruent_atlas):
        _, graph, _ = congruent_atlas
        for e in graph.edges:
            assert sum(v for _, v in e.contributions) == pytest.approx(e.similarity, abs=1e-6)

    def test_contribution_decomposition_identity(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            k = int(rng.integers(2, 9))
            d = int(rng.integers(2, 7))
            u = rng.standard_normal(d * k)
            v = rng.standard_normal(d * k)
            parts = anchor_contributions(u, v, k)
            assert parts.shape == (k,)
            assert float(np.sum(parts)) == pytest.approx(float(u @ v), abs=1e-10)

    def test_zero_top_edges_gives_empty_edge_list(self, congruent_atlas):
        ds, _, _ = congruent_atlas
        bank = train_anchors(
            ds.anchor_weak_set(),
            AnchorHyperParams(k=4, lam=0.05, gamma=1.0, learning_rate=0.02,
                              iterations=300, seed=0, log_every=0),
        )
        model = train_part(
            ds.weak_set("part-a"), "B", cfg=MilConfig(lam=0.01, appearance_rounds=1, joint_rounds=0)
        )
        graph = export_atlas({"part-a": model}, bank, ds.store,
                             image_ids=ds.object_scene_ids()[:3], top_edges=0)
        assert graph.edges == []
        assert graph.nodes

    def test_committed_viewer_fixture_matches_regeneration(self, congruent_atlas):
        _, _, path = congruent_atlas
        assert FIXTURE.exists(), "viewer fixture missing; regenerate from this test's recipe"
        assert json.loads(FIXTURE.read_text()) == json.loads(path.read_text())
