import numpy as np
import pytest

from partatlas.embeddings import (
    AnchorDetections,
    DescriptorStore,
    Detection,
    EmbeddingConfig,
    ImageRecord,
    context_region,
    embed,
    embed_all,
    embedding_dim,
    geometric_embed,
    joint_embed,
)
from partatlas.errors import ConfigError, DataError, InvalidRegionError, MissingProposalError
from partatlas.geometry import OverlapConfig, Region, rho


def unit_rows(rng, n, d):
    m = rng.standard_normal((n, d))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def make_record(rng, boxes, d=6, image_id="img", w=100.0, h=100.0):
    return ImageRecord(
        image_id=image_id,
        width=w,
        height=h,
        proposals=tuple(boxes),
        descriptors=unit_rows(rng, len(boxes), d),
    )


def dets_for(regions_scores, k=None, nms_iou=0.3, L=5):
    per_anchor = tuple(
        tuple(Detection(r, s) for r, s in anchor) for anchor in regions_scores
    )
    return AnchorDetections(
        image_id="img", per_anchor=per_anchor, nms_iou=nms_iou, max_per_anchor=L
    )


class TestImageRecord:
    def test_non_unit_rows_rejected(self):
        with pytest.raises(DataError):
            ImageRecord("x", 10, 10, (Region(0, 0, 1, 1),), np.array([[2.0, 0.0]]))

    def test_row_count_mismatch(self):
        with pytest.raises(DataError):
            ImageRecord("x", 10, 10, (Region(0, 0, 1, 1),), np.eye(2))

    def test_store_rejects_duplicates_and_dim_mismatch(self):
        rng = np.random.default_rng(0)
        rec = make_record(rng, [Region(0, 0, 1, 1)])
        store = DescriptorStore([rec])
        with pytest.raises(DataError):
            store.add(make_record(rng, [Region(0, 0, 1, 1)]))
        with pytest.raises(DataError):
            store.add(make_record(rng, [Region(0, 0, 1, 1)], d=9, image_id="other"))


class TestContextRegion:
    def test_centered_dilation(self):
        r = context_region(Region(10, 10, 20, 20), 2.0, 100, 100)
        assert (r.x1, r.y1, r.x2, r.y2) == (5, 5, 25, 25)

    def test_clip_rule(self):
        r = context_region(Region(0, 0, 10, 10), 2.0, 100, 100)
        assert (r.x1, r.y1, r.x2, r.y2) == (0, 0, 15, 15)

    def test_continuity_near_one(self):
        r0 = Region(10, 20, 30, 44)
        r = context_region(r0, 1 + 1e-9, 100, 100)
        for a, b in zip((r.x1, r.y1, r.x2, r.y2), (r0.x1, r0.y1, r0.x2, r0.y2)):
            assert abs(a - b) <= 1e-6

    def test_outside_image_rejected(self):
        with pytest.raises(InvalidRegionError):
            context_region(Region(-1, 0, 10, 10), 2.0, 100, 100)

    def test_scale_must_exceed_one(self):
        with pytest.raises(ConfigError):
            context_region(Region(0, 0, 1, 1), 1.0, 10, 10)


class TestGeometricEmbed:
    def test_self_detection_scores_one(self):
        r = Region(10, 10, 20, 20)
        dets = dets_for([[(r, 1.0)]])
        cfg = EmbeddingConfig(variant="B+G", overlap=OverlapConfig(mode="soft", alpha=1.0))
        phi = geometric_embed(r, dets, cfg)
        assert phi.shape == (1,)
        assert phi[0] == pytest.approx(1.0, abs=1e-12)

    def test_negative_scores_gate_to_zero(self):
        r = Region(10, 10, 20, 20)
        dets = dets_for([
            [(r, 1.0)],
            [(Region(12, 12, 22, 22), -0.5), (Region(40, 40, 50, 50), -2.0)],
        ])
        cfg = EmbeddingConfig(variant="B+G")
        phi = geometric_embed(r, dets, cfg)
        assert phi[1] == 0.0

    def test_empty_anchor_is_zero(self):
        r = Region(10, 10, 20, 20)
        dets = dets_for([[], [(r, 0.4)]])
        phi = geometric_embed(r, dets, EmbeddingConfig(variant="B+G"))
        assert phi[0] == 0.0 and phi[1] > 0.0

    def test_max_over_detections_vs_bruteforce(self):
        rng = np.random.default_rng(1)
        cfg = EmbeddingConfig(variant="B+G", overlap=OverlapConfig(mode="soft", alpha=0.1))
        for _ in range(20):
            r = Region(*np.sort(rng.uniform(0, 50, 2)).tolist(), *(np.sort(rng.uniform(0, 50, 2)) + 60).tolist())
            r = Region(rng.uniform(0, 40), rng.uniform(0, 40), rng.uniform(50, 90), rng.uniform(50, 90))
            anchor = []
            for _ in range(int(rng.integers(1, 5))):
                x1, y1 = rng.uniform(0, 60, 2)
                anchor.append((Region(x1, y1, x1 + rng.uniform(5, 30), y1 + rng.uniform(5, 30)),
                               float(rng.uniform(-1, 1))))
            anchor.sort(key=lambda t: -t[1])
            dets = dets_for([anchor], nms_iou=0.99)
            phi = geometric_embed(r, dets, cfg)
            brute = max(
                (rho(r, q, cfg.overlap) * max(0.0, s) for q, s in anchor), default=0.0
            )
            brute = max(brute, 0.0)
            assert phi[0] == pytest.approx(brute, abs=1e-12)

    def test_equal_scores_pick_best_overlap(self):
        r = Region(10, 10, 20, 20)
        q1 = Region(11, 11, 21, 21)
        q2 = Region(40, 40, 50, 50)
        cfg = EmbeddingConfig(variant="B+G", overlap=OverlapConfig(mode="soft", alpha=0.5))
        dets = dets_for([[(q1, 0.5), (q2, 0.5)]], nms_iou=0.99)
        phi = geometric_embed(r, dets, cfg)
        expected = 0.5 * max(rho(r, q1, cfg.overlap), rho(r, q2, cfg.overlap))
        assert phi[0] == pytest.approx(expected, abs=1e-12)


class TestJointEmbed:
    def test_appearance_major_order(self):
        out = joint_embed(np.array([1.0, 0.0]), np.array([0.5, 0.2]))
        assert np.array_equal(out, np.array([0.5, 0.2, 0.0, 0.0]))

    def test_zero_geometry_zero_vector(self):
        out = joint_embed(np.array([0.3, 0.4]), np.zeros(3))
        assert np.array_equal(out, np.zeros(6))

    def test_empty_rejected(self):
        with pytest.raises(ConfigError):
            joint_embed(np.zeros(0), np.array([1.0]))

    def test_scoring_interpolation_identity(self):
        rng = np.random.default_rng(2)
        d_a, k = 7, 4
        for _ in range(20):
            a = rng.standard_normal(d_a)
            g = rng.standard_normal(k)
            w = rng.standard_normal(d_a * k)
            lhs = float(w @ joint_embed(a, g))
            rhs = sum(g[j] * float(w[j::k] @ a) for j in range(k))
            assert lhs == pytest.approx(rhs, abs=1e-10)


class TestEmbed:
    def setup_method(self):
        rng = np.random.default_rng(3)
        self.boxes = [
            Region(0, 0, 100, 100),
            Region(10, 10, 30, 30),
            Region(5, 5, 45, 45),   # close to context of box 1
            Region(60, 60, 90, 90),
        ]
        self.record = make_record(rng, self.boxes, d=5)
        self.store = DescriptorStore([self.record])
        self.dets = dets_for([[(Region(8, 8, 32, 32), 0.9)], [(Region(55, 55, 95, 95), 0.7)]])

    def test_variant_b_returns_stored_row(self):
        out = embed(self.store, "img", self.boxes[1], None, EmbeddingConfig(variant="B"))
        assert np.array_equal(out, self.record.descriptors[1])

    def test_dimensions(self):
        d_a, k = 5, 2
        assert embedding_dim("B", d_a, k) == 5
        assert embedding_dim("B+C", d_a, k) == 10
        assert embedding_dim("B+G", d_a, k) == 10
        assert embedding_dim("B+C+G", d_a, k) == 20
        for variant in ("B", "B+C", "B+G", "B+C+G"):
            cfg = EmbeddingConfig(variant=variant)
            out = embed(self.store, "img", self.boxes[1],
                        self.dets if cfg.uses_geometry else None, cfg)
            assert out.shape == (embedding_dim(variant, d_a, k),)

    def test_bg_with_scalar_one_geometry_equals_b(self):
        r = Region(10, 10, 30, 30)
        dets = dets_for([[(r, 1.0)]])
        b = embed(self.store, "img", r, None, EmbeddingConfig(variant="B"))
        bg = embed(self.store, "img", r, dets, EmbeddingConfig(variant="B+G"))
        assert np.allclose(bg, b, atol=1e-12)

    def test_missing_proposal_error(self):
        with pytest.raises(MissingProposalError) as err:
            embed(self.store, "img", Region(1, 2, 3, 4), None, EmbeddingConfig(variant="B"))
        assert "1" in str(err.value) and "img" in str(err.value)

    def test_embed_all_matches_embed(self):
        for variant in ("B", "B+C", "B+G", "B+C+G"):
            cfg = EmbeddingConfig(variant=variant)
            dets = self.dets if cfg.uses_geometry else None
            rows = embed_all(self.record, dets, cfg)
            for i, r in enumerate(self.boxes):
                single = embed(self.store, "img", r, dets, cfg)
                assert np.array_equal(rows[i], single)

    def test_geometry_variant_requires_detections(self):
        with pytest.raises(ConfigError):
            embed_all(self.record, None, EmbeddingConfig(variant="B+G"))

    def test_determinism(self):
        cfg = EmbeddingConfig(variant="B+C+G")
        a = embed_all(self.record, self.dets, cfg)
        b = embed_all(self.record, self.dets, cfg)
        assert np.array_equal(a, b)


class TestAnchorDetectionsInvariants:
    def test_unsorted_scores_rejected(self):
        with pytest.raises(DataError):
            dets_for([[(Region(0, 0, 1, 1), 0.1), (Region(5, 5, 6, 6), 0.9)]])

    def test_too_many_detections_rejected(self):
        rows = [(Region(10 * i, 0, 10 * i + 5, 5), 1.0 - 0.1 * i) for i in range(6)]
        with pytest.raises(DataError):
            dets_for([rows], L=5)

    def test_overlapping_beyond_threshold_rejected(self):
        with pytest.raises(DataError):
            dets_for([[(Region(0, 0, 10, 10), 1.0), (Region(1, 1, 11, 11), 0.5)]], nms_iou=0.3)


class TestGeometricInvariance:
    def test_phi_g_similarity_invariance(self):
        rng = np.random.default_rng(4)
        r = Region(20, 30, 45, 60)
        anchors = [
            [(Region(10, 10, 40, 42), 0.8), (Region(60, 55, 95, 90), 0.3)],
            [(Region(25, 20, 55, 50), 0.6)],
        ]
        for mode, alpha, tol in (("hard", None, 1e-12), ("soft", 0.4, 1e-6)):
            for _ in range(20):
                s = float(rng.uniform(0.25, 4.0))
                tx, ty = rng.uniform(-40, 40, 2)

                def t(b: Region) -> Region:
                    return Region(s * b.x1 + tx, s * b.y1 + ty, s * b.x2 + tx, s * b.y2 + ty)

                base_cfg = EmbeddingConfig(
                    variant="B+G", overlap=OverlapConfig(mode=mode, alpha=alpha)
                )
                moved_cfg = EmbeddingConfig(
                    variant="B+G",
                    overlap=OverlapConfig(mode=mode, alpha=None if alpha is None else alpha / s),
                )
                base = geometric_embed(r, dets_for(anchors, nms_iou=0.99), base_cfg)
                moved = geometric_embed(
                    t(r),
                    dets_for([[(t(b), sc) for b, sc in a] for a in anchors], nms_iou=0.99),
                    moved_cfg,
                )
                assert np.allclose(base, moved, atol=tol)

    def test_robustness_bound_zeroing_one_component(self):
        # with gated scores <= 1 every component is <= 1, so zeroing one
        # moves the joint score by at most the largest slice response
        rng = np.random.default_rng(5)
        d_a, k = 6, 5
        for _ in range(30):
            a = rng.standard_normal(d_a)
            a /= np.linalg.norm(a)
            g = rng.uniform(0, 1, k)
            w = rng.standard_normal(d_a * k)
            full = float(w @ joint_embed(a, g))
            slice_scores = [abs(float(w[j::k] @ a)) for j in range(k)]
            for j in range(k):
                g2 = g.copy()
                g2[j] = 0.0
                dropped = float(w @ joint_embed(a, g2))
                assert abs(full - dropped) <= max(slice_scores) + 1e-12
