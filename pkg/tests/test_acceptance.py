"""Acceptance suite: every release criterion with its pinned tolerance.

Run with ``pytest tests/test_acceptance.py -v -s`` to see one pass/fail
line per criterion. The heavier experiments (anchor diversity, the
detection-ordering surrogate) are budgeted and assert their own runtime.
"""

import itertools
import time
from contextlib import contextmanager

import numpy as np
import pytest

from partatlas.anchors import AnchorBank, AnchorHyperParams, detect_anchors_all, train_anchors
from partatlas.atlas import export_atlas
from partatlas.embeddings import (
    AnchorDetections,
    Detection,
    EmbeddingConfig,
    geometric_embed,
)
from partatlas.evalbench import average_precision, corloc, match_benchmark, match_regions
from partatlas.evaldata import GroundTruth, GTBox
from partatlas.fileio import (
    load_atlas,
    load_bank,
    load_dataset,
    load_descriptors,
    load_model,
    save_atlas,
    save_bank,
    save_dataset,
    save_descriptors,
    save_model,
)
from partatlas.geometry import OverlapConfig, Region, gram_matrix, iou, rho
from partatlas.mil import EmbeddedDataset, ExemplarSpec, MilConfig, PartModel, RoundLog, detect_part, train_part
from partatlas.synth import (
    congruent_profile,
    generate_synthetic,
    nested_extent_profile,
    standard_profile,
    two_pattern_set,
)

from oracles import (
    brute_average_precision,
    brute_corloc,
    midpoint_siou,
)


@contextmanager
def criterion(name):
    started = time.monotonic()
    try:
        yield
    except BaseException:
        print(f"[acceptance] {name}: FAIL ({time.monotonic() - started:.1f}s)")
        raise
    print(f"[acceptance] {name}: PASS ({time.monotonic() - started:.1f}s)")


def random_region(rng, lo=0.0, hi=100.0, min_side=0.5):
    x1, y1 = rng.uniform(lo, hi - min_side, 2)
    w = rng.uniform(min_side, hi - x1)
    h = rng.uniform(min_side, hi - y1)
    return Region(x1, y1, x1 + w, y1 + h)


def unit_pair(rng):
    w = rng.uniform(0.3, 2.0)
    h = rng.uniform(0.3, 2.0)
    x1, y1 = rng.uniform(0, 1, 2)
    r = Region(x1, y1, x1 + w, y1 + h)
    dx, dy = rng.uniform(-0.4, 0.4) * w, rng.uniform(-0.4, 0.4) * h
    q = Region(
        x1 + dx, y1 + dy,
        x1 + dx + rng.uniform(0.7, 1.3) * w, y1 + dy + rng.uniform(0.7, 1.3) * h,
    )
    return r, q


def test_c01_kernel_soundness():
    """100 random 20-region sets, hard and soft Gram matrices PSD, < 10 s."""
    with criterion("kernel soundness (PSD Gram, 100 sets)"):
        started = time.monotonic()
        rng = np.random.default_rng(100)
        for trial in range(100):
            regions = [random_region(rng) for _ in range(20)]
            if trial % 2 == 0:
                cfg = OverlapConfig(mode="hard")
            else:
                alpha = float(rng.uniform(0.02, 8.0)) if trial % 4 == 1 else None
                cfg = OverlapConfig(mode="soft", alpha=alpha)
            g = gram_matrix(regions, cfg)
            assert np.linalg.eigvalsh(g).min() >= -1e-8
        assert time.monotonic() - started < 10.0


def test_c02_siou_iou_limit_and_oracle():
    """alpha=1000 on unit-scale pairs: |SIoU - IoU| <= 0.02, oracle to 1e-4."""
    with criterion("SIoU->IoU limit and quadrature oracle"):
        rng = np.random.default_rng(101)
        cfg = OverlapConfig(mode="soft", alpha=1000.0)
        worst_gap = 0.0
        for i in range(100):
            r, q = unit_pair(rng)
            value = rho(r, q, cfg)
            worst_gap = max(worst_gap, abs(value - iou(r, q)))
            if i < 30:  # dense-grid agreement on a subsample keeps this quick
                oracle = midpoint_siou(r, q, 1000.0, 8 / 1000.0, n=16384)
                assert value == pytest.approx(oracle, abs=1e-4)
        assert worst_gap <= 0.02


def test_c03_similarity_invariance():
    """Similarity transforms leave phi^g unchanged: hard 1e-12, soft 1e-6."""
    with criterion("similarity invariance of phi^g"):
        rng = np.random.default_rng(102)
        r = Region(20, 30, 45, 60)
        anchors = [
            [(Region(10, 10, 40, 42), 0.8), (Region(60, 55, 95, 90), 0.3)],
            [(Region(25, 20, 55, 50), 0.6)],
            [],
        ]

        def build(regions_scores, nms=0.99, L=5):
            per_anchor = tuple(
                tuple(Detection(b, s) for b, s in anchor) for anchor in regions_scores
            )
            return AnchorDetections("img", per_anchor, nms, L)

        for mode, alpha, tol in (("hard", None, 1e-12), ("soft", 0.4, 1e-6)):
            for _ in range(40):
                s = float(rng.uniform(0.25, 4.0))
                tx, ty = rng.uniform(-80, 80, 2)

                def t(b):
                    return Region(s * b.x1 + tx, s * b.y1 + ty, s * b.x2 + tx, s * b.y2 + ty)

                base = geometric_embed(
                    r, build(anchors),
                    EmbeddingConfig(variant="B+G", overlap=OverlapConfig(mode=mode, alpha=alpha)),
                )
                moved = geometric_embed(
                    t(r), build([[(t(b), sc) for b, sc in a] for a in anchors]),
                    EmbeddingConfig(
                        variant="B+G",
                        overlap=OverlapConfig(mode=mode, alpha=None if alpha is None else alpha / s),
                    ),
                )
                assert np.allclose(base, moved, atol=tol)


def test_c04_anchor_gradient_checks():
    """Analytic anchor-objective gradient vs central differences, 20 points."""
    with criterion("anchor objective gradient checks"):
        from partatlas.anchors import WeakImage, WeakImageSet, anchor_objective, anchor_objective_grad
        from partatlas.embeddings import DescriptorStore, ImageRecord

        rng = np.random.default_rng(103)
        records, items = [], []
        boxes = tuple(Region(12.0 * j, 0.0, 12.0 * j + 10.0, 10.0) for j in range(5))
        for i in range(7):
            m = rng.standard_normal((5, 6))
            m /= np.linalg.norm(m, axis=1, keepdims=True)
            records.append(ImageRecord(f"im{i}", 60.0, 10.0, boxes, m))
            items.append(WeakImage(f"im{i}", 1 if i < 4 else -1))
        data = WeakImageSet(items, DescriptorStore(records))
        hyper = AnchorHyperParams(k=3, lam=0.15, gamma=0.9)
        h = 1e-6
        checked = attempts = 0
        while checked < 20 and attempts < 300:
            attempts += 1
            weights = rng.standard_normal((3, 6))
            fragile = False
            for it in items:
                scores = data.store[it.image_id].descriptors @ weights.T
                top = np.sort(scores, axis=0)
                if np.any(np.abs(top[-1]) < 1e-3) or np.any(top[-1] - top[-2] < 1e-3):
                    fragile = True
                    break
            if fragile:
                continue
            checked += 1
            bank = AnchorBank(weights, hyper)
            _, grad = anchor_objective_grad(bank, data)
            fd = np.zeros_like(grad)
            for a in range(3):
                for b in range(6):
                    wp, wm = weights.copy(), weights.copy()
                    wp[a, b] += h
                    wm[a, b] -= h
                    fd[a, b] = (
                        anchor_objective(AnchorBank(wp, hyper), data)
                        - anchor_objective(AnchorBank(wm, hyper), data)
                    ) / (2 * h)
            assert np.linalg.norm(grad - fd) / np.linalg.norm(fd) <= 1e-4
        assert checked == 20


def test_c05_diversity_effect():
    """Two-pattern set: gamma=1 -> mean |cos| < 0.3, gamma=0 -> > 0.9; < 60 s."""
    with criterion("anchor diversity vs degeneracy (gamma 1 vs 0)"):
        started = time.monotonic()
        data, _, _ = two_pattern_set(seed=0)
        cosines = {}
        for gamma in (1.0, 0.0):
            hyper = AnchorHyperParams(
                k=2, lam=0.35, gamma=gamma, learning_rate=0.02,
                iterations=8000, seed=0, log_every=0,
            )
            bank = train_anchors(data, hyper)
            u = bank.weights / np.linalg.norm(bank.weights, axis=1, keepdims=True)
            cosines[gamma] = abs(float(u[0] @ u[1]))
        assert cosines[1.0] < 0.3
        assert cosines[0.0] > 0.9
        assert time.monotonic() - started < 60.0


def test_c06_mil_monotone_descent():
    """Per-phase objective non-increasing within 1e-3 on 10 random datasets."""
    with criterion("MIL monotone descent (10 datasets)"):
        for seed in range(10):
            ds = generate_synthetic(standard_profile(seed=seed + 40, image_count=60))
            bank = train_anchors(
                ds.anchor_weak_set(),
                AnchorHyperParams(k=8, lam=0.05, gamma=1.0, learning_rate=0.02,
                                  iterations=1200, seed=0, log_every=0),
            )
            model = train_part(
                ds.weak_set("part-a"), "B+C+G", anchors=bank, cfg=MilConfig(lam=0.01)
            )
            log = model.training_log
            for prev, cur in zip(log, log[1:]):
                if prev.phase == cur.phase:
                    assert cur.objective <= prev.objective + 1e-3


def _corloc_for(ds, bank, dets, variant, cfg):
    values = []
    for concept in ds.concepts:
        model = train_part(ds.weak_set(concept), variant, anchors=bank, cfg=cfg, dets=dets)
        ecfg = EmbeddingConfig(variant=variant, overlap=cfg.overlap, context_scale=cfg.context_scale)
        clean = ds.clean_positive_ids(concept)
        embedded = EmbeddedDataset.for_images(
            ds.store, clean, dets if ecfg.uses_geometry else None, ecfg
        )
        top1 = {i: detect_part(model, i, embedded, top_n=1)[0][0] for i in clean}
        values.append(corloc(top1, ds.gt, concept))
    return float(np.mean(values))


def test_c07_detection_ordering_surrogate():
    """Standard profile, 5 seeds: CorLoc(B+G) >= CorLoc(B), CorLoc(B+C+G) >=
    CorLoc(B), and CorLoc(B+C+G) >= 0.8 on clean positives; < 10 min."""
    with criterion("detection ordering surrogate (200 images x 5 seeds)"):
        started = time.monotonic()
        means = {v: [] for v in ("B", "B+G", "B+C+G")}
        cfg = MilConfig(lam=0.01)  # best of the spec's lambda grid on this profile
        for seed in range(5):
            ds = generate_synthetic(standard_profile(seed=seed, image_count=200))
            bank = train_anchors(
                ds.anchor_weak_set(),
                AnchorHyperParams(k=8, lam=0.05, gamma=1.0, learning_rate=0.02,
                                  iterations=4000, seed=0, log_every=0),
            )
            dets = detect_anchors_all(bank, ds.store, L=5, nms_iou=0.3)
            for variant in means:
                means[variant].append(_corloc_for(ds, bank, dets, variant, cfg))
        avg = {v: float(np.mean(vals)) for v, vals in means.items()}
        print(f"  seed-averaged CorLoc: {avg}")
        assert avg["B+G"] >= avg["B"]
        assert avg["B+C+G"] >= avg["B"]
        assert avg["B+C+G"] >= 0.8
        assert time.monotonic() - started < 600.0


def test_c08_exemplar_effect():
    """A+B+C+G pins the annotated extent (>= 0.9 per run); B+C+G is
    ambiguous (its winning extent varies across runs); beta=0 is
    byte-identical to no exemplar."""
    with criterion("single strong annotation resolves extent ambiguity"):
        annotated_rates = []
        base_rates = []
        for seed in range(4):
            ds = generate_synthetic(nested_extent_profile(seed=seed, image_count=80))
            bank = train_anchors(
                ds.anchor_weak_set(),
                AnchorHyperParams(k=8, lam=0.05, gamma=1.0, learning_rate=0.02,
                                  iterations=3000, seed=0, log_every=0),
            )
            dets = detect_anchors_all(bank, ds.store, L=5, nms_iou=0.3)
            concept = "part-a"
            data = ds.weak_set(concept)
            cfg = MilConfig(lam=0.01)

            def annotated_fraction(model):
                hits = total = 0
                for img in ds.positive_ids(concept):
                    total += 1
                    if model.final_selections.get(img) == ds.planted[img].get(concept):
                        hits += 1
                return hits / total

            base = train_part(data, "B+C+G", anchors=bank, cfg=cfg, dets=dets)
            img0 = ds.object_scene_ids()[0]
            inner = ds.store[img0].proposals[ds.planted[img0][concept]]
            with_ex = train_part(
                data, "B+C+G", anchors=bank,
                exemplar=ExemplarSpec(img0, inner, beta=2.0), cfg=cfg, dets=dets,
            )
            zero_beta = train_part(
                data, "B+C+G", anchors=bank,
                exemplar=ExemplarSpec(img0, inner, beta=0.0), cfg=cfg, dets=dets,
            )
            assert np.array_equal(zero_beta.w, base.w)
            assert zero_beta.final_selections == base.final_selections
            assert zero_beta.training_log == base.training_log
            annotated_rates.append(annotated_fraction(with_ex))
            base_rates.append(annotated_fraction(base))
        print(f"  annotated-extent rates: exemplar={annotated_rates} base={base_rates}")
        assert all(r >= 0.9 for r in annotated_rates)
        # without the exemplar the winner is arbitrary: pooled over runs the
        # annotated extent neither dominates nor vanishes
        pooled = float(np.mean(base_rates))
        assert 0.1 <= pooled <= 0.9


def test_c09_matching_surrogate():
    """Congruent noise-free scenes: anchor-ag >= anchor-g > a, anchor-ag >=
    0.9, and 100% agreement with the exhaustive argmax oracle."""
    with criterion("semantic matching ordering surrogate"):
        ds = generate_synthetic(congruent_profile(seed=0, image_count=20))
        bank = train_anchors(
            ds.anchor_weak_set(),
            AnchorHyperParams(k=8, lam=0.05, gamma=1.0, learning_rate=0.02,
                              iterations=2000, seed=0, log_every=0),
        )
        dets = detect_anchors_all(bank, ds.store, L=5, nms_iou=0.3)
        objs = ds.object_scene_ids()
        pairs = list(itertools.permutations(objs[:9], 2))
        means = {}
        for variant in ("anchor-ag", "anchor-g", "a"):
            res = match_benchmark(ds.store, ds.gt, pairs, variant, dets, normalize=True)
            means[variant] = float(np.mean(list(res.mean_iou.values())))
        print(f"  mean match IoU: {means}")
        assert means["anchor-ag"] >= means["anchor-g"] > means["a"]
        assert means["anchor-ag"] >= 0.9

        # exhaustive oracle agreement on one pair, all proposals, all variants
        from partatlas.evalbench import _MatchMatrixCache

        src_id, tgt_id = objs[0], objs[1]
        for variant in ("anchor-ag", "anchor-g", "a"):
            cache = _MatchMatrixCache(ds.store, dets, variant, OverlapConfig(), True)
            src_m, tgt_m = cache.matrix(src_id), cache.matrix(tgt_id)
            for idx in range(ds.store[src_id].n_proposals):
                got = match_regions(
                    ds.store, (src_id, ds.store[src_id].proposals[idx]), tgt_id,
                    variant, dets,
                )
                scores = [float(tgt_m[j] @ src_m[idx]) for j in range(tgt_m.shape[0])]
                best = max(range(len(scores)), key=lambda j: (scores[j], -j))
                assert got == ds.store[tgt_id].proposals[best]


def test_c10_metric_oracles():
    """AP and CorLoc match brute force to 1e-10 on 1000 cases; a perfect
    detector on noise-free data scores exactly 1.0."""
    with criterion("metric oracles (1000 randomized cases)"):
        rng = np.random.default_rng(104)
        checked = 0
        while checked < 1000:
            gt = GroundTruth(vocabulary=("c",))
            gt_by_image = {}
            dets = {}
            for i in range(int(rng.integers(1, 4))):
                image_id = f"im{i}"
                boxes = []
                for _ in range(int(rng.integers(0, 4))):
                    x1, y1 = rng.uniform(0, 60, 2)
                    region = Region(x1, y1, x1 + rng.uniform(5, 30), y1 + rng.uniform(5, 30))
                    ignored = bool(rng.random() < 0.15)
                    gt.add(image_id, GTBox("c", region, difficult=ignored))
                    boxes.append((region, ignored))
                if boxes:
                    gt_by_image[image_id] = boxes
                rows = []
                for _ in range(int(rng.integers(0, 7))):
                    if boxes and rng.random() < 0.6:
                        base, _ = boxes[int(rng.integers(0, len(boxes)))]
                        dx, dy = rng.uniform(-6, 6, 2)
                        region = Region(base.x1 + dx, base.y1 + dy, base.x2 + dx, base.y2 + dy)
                    else:
                        x1, y1 = rng.uniform(0, 60, 2)
                        region = Region(x1, y1, x1 + rng.uniform(5, 30), y1 + rng.uniform(5, 30))
                    rows.append((region, float(rng.standard_normal())))
                rows.sort(key=lambda t: -t[1])
                dets[image_id] = rows
            n_clean = sum(1 for b in gt_by_image.values() for _, ign in b if not ign)
            if n_clean == 0:
                continue
            checked += 1
            expected = brute_average_precision(dets, gt_by_image, 0.4)
            assert average_precision(dets, gt, "c", 0.4) == pytest.approx(expected, abs=1e-10)
            top1 = {i: rows[0][0] for i, rows in dets.items() if rows}
            if top1:
                assert corloc(top1, gt, "c", 0.4) == pytest.approx(
                    brute_corloc(top1, gt_by_image, 0.4), abs=1e-10
                )

        # oracle detector on noise-free planted scenes scores exactly 1.0
        ds = generate_synthetic(congruent_profile(seed=1, image_count=16))
        for concept in ds.concepts:
            dets_all, top1 = {}, {}
            positives = ds.positive_ids(concept)
            for image_id in positives:
                box = ds.store[image_id].proposals[ds.planted[image_id][concept]]
                dets_all[image_id] = [(box, 1.0)]
                top1[image_id] = box
            assert average_precision(dets_all, ds.gt, concept, 0.4) == 1.0
            assert corloc(top1, ds.gt, concept, 0.4) == 1.0


def test_c11_round_trip_io(tmp_path):
    """Dataset/model/bank/atlas save->load identity; descriptor files
    bit-exact per the declared layout."""
    with criterion("round-trip serialization"):
        import struct

        rng = np.random.default_rng(105)

        # descriptor layout, bit for bit
        m = rng.standard_normal((4, 3)).astype("<f4")
        path = tmp_path / "d.bin"
        save_descriptors(path, m)
        assert path.read_bytes() == b"AMIL" + struct.pack("<III", 1, 4, 3) + m.tobytes("C")
        assert np.array_equal(load_descriptors(path), m.astype(float))

        # dataset
        ds = generate_synthetic(congruent_profile(seed=2, image_count=12))
        manifest = save_dataset(tmp_path / "data", ds.store, ds.labels, ds.gt)
        loaded = load_dataset(manifest)
        assert set(loaded.store.image_ids()) == set(ds.store.image_ids())
        for image_id in ds.store.image_ids():
            assert loaded.store[image_id].proposals == ds.store[image_id].proposals
        assert loaded.labels == ds.labels
        assert loaded.gt == ds.gt

        # bank, model
        bank = train_anchors(
            ds.anchor_weak_set(),
            AnchorHyperParams(k=4, lam=0.05, gamma=1.0, learning_rate=0.02,
                              iterations=400, seed=0, log_every=200),
        )
        save_bank(tmp_path / "bank.json", bank)
        bank2 = load_bank(tmp_path / "bank.json")
        assert np.array_equal(bank2.weights, bank.weights)
        assert bank2.hyper == bank.hyper
        assert bank2.training_log == bank.training_log

        model = PartModel(
            w=rng.standard_normal(8), variant="B+C", lam=0.01, d_a=4, n_anchors=0,
            training_log=[RoundLog(1, "appearance", 0.8, 3)],
            final_selections={"img-0001-obj": 1},
        )
        save_model(tmp_path / "model.json", model)
        model2 = load_model(tmp_path / "model.json")
        assert np.array_equal(model2.w, model.w)
        assert model2.training_log == model.training_log
        assert model2.final_selections == model.final_selections

        # atlas from a real export on the congruent scenes
        dets = detect_anchors_all(bank, ds.store, L=5, nms_iou=0.3)
        part_model = train_part(
            ds.weak_set("part-a"), "B+G", anchors=bank,
            cfg=MilConfig(lam=0.01, appearance_rounds=2, joint_rounds=2), dets=dets,
        )
        atlas = export_atlas({"part-a": part_model}, bank, ds.store, top_edges=1)
        save_atlas(tmp_path / "atlas.json", atlas)
        atlas2 = load_atlas(tmp_path / "atlas.json")
        assert [n.image_id for n in atlas2.nodes] == [n.image_id for n in atlas.nodes]
        assert atlas2.edges == atlas.edges
        for e in atlas2.edges:
            assert abs(sum(v for _, v in e.contributions) - e.similarity) <= 1e-6
