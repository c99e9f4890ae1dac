"""Command-line surface.

Verbs: synth, train-anchors, detect-anchors, train-part, detect, eval,
match, grid-encode, atlas. Global flags: --seed, --config, --threads,
--out. Every run writes a reproducibility block (resolved-config hash,
seed, package versions) next to its outputs. Exit codes: 0 ok, 1 usage
or configuration error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .anchors import AnchorHyperParams, detect_anchors_all, train_anchors
from .atlas import export_atlas
from .embeddings import AnchorDetections, Detection, EmbeddingConfig
from .errors import ConfigError, DataError, NumericError, PartAtlasError
from .evalbench import match_benchmark, grid_encode, MATCH_VARIANTS
from .fileio import (
    FORMAT_VERSION,
    load_bank,
    load_dataset,
    load_model,
    save_atlas,
    save_bank,
    save_dataset,
    save_descriptors,
    save_model,
)
from .geometry import Region
from .mil import EmbeddedDataset, ExemplarSpec, MilConfig, detect_part, train_part
from .report import write_eval_report, write_match_report
from .synth import (
    congruent_profile,
    generate_synthetic,
    nested_extent_profile,
    standard_profile,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # usage problems -> exit code 1
        raise ConfigError(message)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--config", type=Path, default=None, help="JSON config with defaults")
    p.add_argument("--threads", type=int, default=1, help="worker threads for per-image loops")
    p.add_argument("--out", type=Path, required=True, help="output file or directory")


def _apply_config_file(args: argparse.Namespace, parser: argparse.ArgumentParser) -> None:
    """Config-file values fill in for flags left at their parser defaults;
    anything passed explicitly on the command line wins."""
    if args.config is None:
        return
    try:
        overrides = json.loads(Path(args.config).read_text())
    except FileNotFoundError:
        raise DataError(f"{args.config}: no such config file") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{args.config}: invalid JSON ({exc})") from exc
    for key, value in overrides.items():
        attr = key.replace("-", "_")
        if not hasattr(args, attr):
            raise ConfigError(f"{args.config}: unknown config key {key!r}")
        if getattr(args, attr) == parser.get_default(attr) or getattr(args, attr) is None:
            setattr(args, attr, value)


def _jsonable(value):
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def _write_run_info(out: Path, args: argparse.Namespace, command: str) -> None:
    resolved = {
        k: _jsonable(v)
        for k, v in sorted(vars(args).items())
        if not k.startswith("_") and k != "func"
    }
    blob = json.dumps(resolved, sort_keys=True)
    info = {
        "command": command,
        "config_hash": hashlib.sha256(blob.encode()).hexdigest(),
        "seed": getattr(args, "seed", None),
        "resolved_config": resolved,
        "versions": {
            "partatlas": __version__,
            "format": FORMAT_VERSION,
            "numpy": np.__version__,
            "python": sys.version.split()[0],
        },
    }
    directory = out if out.suffix == "" else out.parent
    directory.mkdir(parents=True, exist_ok=True)
    (directory / f"run_info_{command.replace('-', '_')}.json").write_text(
        json.dumps(info, indent=2)
    )


def _detections_to_json(dets: dict[str, AnchorDetections]) -> dict:
    return {
        "version": FORMAT_VERSION,
        "kind": "anchor-detections",
        "images": {
            image_id: {
                "nms_iou": d.nms_iou,
                "max_per_anchor": d.max_per_anchor,
                "per_anchor": [
                    [[det.region.x1, det.region.y1, det.region.x2, det.region.y2, det.score]
                     for det in anchor_dets]
                    for anchor_dets in d.per_anchor
                ],
            }
            for image_id, d in dets.items()
        },
    }


def load_detections(path: str | Path) -> dict[str, AnchorDetections]:
    try:
        payload = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise DataError(f"{path}: no such file") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc
    if payload.get("version") != FORMAT_VERSION or payload.get("kind") != "anchor-detections":
        raise DataError(f"{path}: not an anchor-detections file of a known version")
    out = {}
    for image_id, d in payload["images"].items():
        out[image_id] = AnchorDetections(
            image_id=image_id,
            per_anchor=tuple(
                tuple(Detection(Region(*row[:4]), float(row[4])) for row in anchor_dets)
                for anchor_dets in d["per_anchor"]
            ),
            nms_iou=float(d["nms_iou"]),
            max_per_anchor=int(d["max_per_anchor"]),
        )
    return out


def _cmd_synth(args) -> int:
    if args.profile == "standard":
        profile = standard_profile(seed=args.seed, image_count=args.count)
    elif args.profile == "congruent":
        profile = congruent_profile(seed=args.seed, image_count=args.count)
    elif args.profile == "nested":
        profile = nested_extent_profile(seed=args.seed, image_count=args.count)
    else:
        raise ConfigError(f"unknown profile {args.profile!r}")
    ds = generate_synthetic(profile)
    meta = {
        image_id: {
            "scene": ds.scene_types[image_id],
            "outlier": image_id in ds.outliers,
            "planted": ds.planted.get(image_id, {}),
        }
        for image_id in ds.scene_types
    }
    manifest = save_dataset(args.out, ds.store, ds.labels, ds.gt, meta)
    _write_run_info(args.out, args, "synth")
    print(f"wrote {manifest} ({len(ds.store)} images, concepts: {', '.join(ds.concepts)})")
    return 0


def _cmd_train_anchors(args) -> int:
    ds = load_dataset(args.data)
    if args.positives == "all-parts":
        labels: dict[str, int] = {}
        for concept in ds.concepts:
            for image_id, y in ds.labels[concept].items():
                if y == 1:
                    labels[image_id] = 1
                elif y == -1 and labels.get(image_id) != 1:
                    labels[image_id] = -1
        from .anchors import WeakImage, WeakImageSet

        items = [WeakImage(i, y) for i, y in sorted(labels.items())]
        data = WeakImageSet(items, ds.store)
    else:
        data = ds.weak_set(args.positives)
    hyper = AnchorHyperParams(
        k=args.k,
        lam=args.lam,
        gamma=args.gamma,
        learning_rate=args.lr,
        momentum=args.momentum,
        iterations=args.iters,
        seed=args.seed,
        log_every=args.log_every,
    )
    bank = train_anchors(data, hyper)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_bank(args.out, bank)
    _write_run_info(args.out, args, "train-anchors")
    print(f"wrote {args.out} (K={bank.k}, d_a={bank.descriptor_dim})")
    return 0


def _cmd_detect_anchors(args) -> int:
    ds = load_dataset(args.data)
    bank = load_bank(args.bank)
    dets = detect_anchors_all(bank, ds.store, L=args.L, nms_iou=args.nms_iou, threads=args.threads)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps(_detections_to_json(dets)))
    _write_run_info(args.out, args, "detect-anchors")
    print(f"wrote {args.out} ({len(dets)} images)")
    return 0


def _mil_config(args) -> MilConfig:
    return MilConfig(
        lam=args.lam,
        appearance_rounds=args.appearance_rounds,
        joint_rounds=args.joint_rounds,
        epochs=args.epochs,
        base_lr=args.base_lr,
        seed=args.seed,
        context_scale=args.context_scale,
        detections_per_anchor=args.L,
        anchor_nms_iou=args.nms_iou,
    )


def _cmd_train_part(args) -> int:
    ds = load_dataset(args.data)
    data = ds.weak_set(args.concept)
    bank = load_bank(args.bank) if args.bank else None
    exemplar = None
    if args.exemplar:
        image_id, x1, y1, x2, y2 = args.exemplar.split(",")
        exemplar = ExemplarSpec(image_id, Region(float(x1), float(y1), float(x2), float(y2)), args.beta)
    cfg = _mil_config(args)
    model = train_part(data, args.variant, anchors=bank, exemplar=exemplar, cfg=cfg)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_model(args.out, model)
    log_path = args.out.with_suffix(".log")
    log_path.write_text(
        "".join(
            f"round={r.round_index} phase={r.phase} objective={r.objective:.6f} "
            f"changed={r.changed}\n"
            for r in model.training_log
        )
    )
    _write_run_info(args.out, args, "train-part")
    print(f"wrote {args.out} and {log_path}")
    return 0


def _cmd_detect(args) -> int:
    ds = load_dataset(args.data)
    model = load_model(args.model)
    cfg = EmbeddingConfig(variant=model.variant, overlap=model.config.overlap,
                          context_scale=model.config.context_scale)
    dets = None
    if cfg.uses_geometry:
        if not args.bank:
            raise ConfigError(f"model variant {model.variant} needs --bank")
        bank = load_bank(args.bank)
        dets = detect_anchors_all(
            bank, ds.store, L=model.config.detections_per_anchor,
            nms_iou=model.config.anchor_nms_iou, threads=args.threads,
        )
    image_ids = ds.store.image_ids()
    embedded = EmbeddedDataset.for_images(ds.store, image_ids, dets, cfg)
    out = {}
    for image_id in image_ids:
        found = detect_part(model, image_id, embedded, top_n=args.top_n, nms_iou=args.nms_iou)
        out[image_id] = [[r.x1, r.y1, r.x2, r.y2, s] for r, s in found]
    payload = {
        "version": FORMAT_VERSION,
        "kind": "part-detections",
        "concept": args.concept,
        "variant": model.variant,
        "detections": out,
    }
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps(payload))
    _write_run_info(args.out, args, "detect")
    print(f"wrote {args.out}")
    return 0


def _cmd_eval(args) -> int:
    ds = load_dataset(args.data)
    if ds.gt is None:
        raise DataError(f"{args.data}: manifest has no ground truth; cannot evaluate")
    dets: dict[str, dict[str, list[tuple[Region, float]]]] = {}
    top1: dict[str, dict[str, Region]] = {}
    for det_path in args.detections:
        try:
            payload = json.loads(Path(det_path).read_text())
        except FileNotFoundError:
            raise DataError(f"{det_path}: no such file") from None
        except json.JSONDecodeError as exc:
            raise DataError(f"{det_path}: invalid JSON ({exc})") from exc
        if payload.get("version") != FORMAT_VERSION or payload.get("kind") != "part-detections":
            raise DataError(f"{det_path}: not a part-detections file of a known version")
        concept = payload["concept"]
        by_img = {
            i: [(Region(*row[:4]), float(row[4])) for row in rows]
            for i, rows in payload["detections"].items()
        }
        dets[concept] = by_img
        positives = [i for i, y in ds.labels.get(concept, {}).items() if y == 1]
        top1[concept] = {i: by_img[i][0][0] for i in positives if by_img.get(i)}
    concepts = sorted(dets)
    results = write_eval_report(
        args.out, dets, top1, ds.gt, concepts, iou_thresh=args.iou_thresh
    )
    _write_run_info(args.out, args, "eval")
    for c in concepts:
        print(f"{c}: AP={results[c]['ap']:.4f} CorLoc={results[c]['corloc']:.4f}")
    return 0


def _cmd_match(args) -> int:
    ds = load_dataset(args.data)
    if ds.gt is None:
        raise DataError(f"{args.data}: manifest has no ground truth; cannot match")
    bank = load_bank(args.bank)
    dets = detect_anchors_all(bank, ds.store, L=args.L, nms_iou=args.nms_iou, threads=args.threads)
    gt_images = [i for i in ds.gt.image_ids()]
    rng = np.random.default_rng(args.seed)
    pairs = []
    for src in gt_images:
        others = [t for t in gt_images if t != src]
        if not others:
            continue
        take = min(args.targets_per_image, len(others))
        for t in rng.choice(len(others), size=take, replace=False):
            pairs.append((src, others[int(t)]))
    per_variant: dict[str, dict[str, float]] = {}
    skipped: dict[str, int] = {}
    for variant in args.variants:
        result = match_benchmark(ds.store, ds.gt, pairs, variant, dets, normalize=not args.raw)
        per_variant[variant] = result.mean_iou
        skipped[variant] = result.skipped
    write_match_report(args.out, per_variant, skipped)
    _write_run_info(args.out, args, "match")
    for v in args.variants:
        means = " ".join(f"{c}={x:.3f}" for c, x in per_variant[v].items())
        print(f"{v}: {means} (skipped {skipped[v]})")
    return 0


def _cmd_grid_encode(args) -> int:
    ds = load_dataset(args.data)
    bank = load_bank(args.bank)
    ids = ds.store.image_ids()
    rows = np.array([grid_encode(ds.store[i], bank) for i in ids])
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_descriptors(args.out, rows)
    args.out.with_suffix(".ids.json").write_text(json.dumps({"version": FORMAT_VERSION, "ids": ids}))
    _write_run_info(args.out, args, "grid-encode")
    print(f"wrote {args.out} ({rows.shape[0]} x {rows.shape[1]})")
    return 0


def _cmd_atlas(args) -> int:
    ds = load_dataset(args.data)
    bank = load_bank(args.bank)
    models = {}
    for spec in args.models:
        concept, path = spec.split("=", 1)
        models[concept] = load_model(path)
    graph = export_atlas(
        models,
        bank,
        ds.store,
        top_edges=args.top_edges,
        boxes_per_image=args.boxes_per_image,
        L=args.L,
        anchor_nms_iou=args.nms_iou,
    )
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_atlas(args.out, graph)
    _write_run_info(args.out, args, "atlas")
    print(f"wrote {args.out} ({len(graph.nodes)} nodes, {len(graph.edges)} edges)")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="partatlas", description=__doc__)
    parser.verb_parsers = {}
    sub = parser.add_subparsers(dest="verb", required=True)

    def add_verb(name, **kwargs):
        p = sub.add_parser(name, **kwargs)
        parser.verb_parsers[name] = p
        return p

    p = add_verb("synth", help="generate a synthetic planted dataset")
    _add_common(p)
    p.add_argument("--profile", default="standard", choices=["standard", "congruent", "nested"])
    p.add_argument("--count", type=int, default=200, help="target image count")
    p.set_defaults(func=_cmd_synth)

    p = add_verb("train-anchors", help="train the anchor bank")
    _add_common(p)
    p.add_argument("--data", type=Path, required=True, help="dataset manifest")
    p.add_argument("--positives", default="all-parts",
                   help="'all-parts' or a concept name for the positive bag")
    p.add_argument("--k", type=int, default=150)
    p.add_argument("--lam", type=float, default=1e-4)
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--iters", type=int, default=40_000)
    p.add_argument("--log-every", type=int, default=1_000)
    p.set_defaults(func=_cmd_train_anchors)

    p = add_verb("detect-anchors", help="run the bank as detectors")
    _add_common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--bank", type=Path, required=True)
    p.add_argument("--L", type=int, default=5)
    p.add_argument("--nms-iou", type=float, default=0.3)
    p.set_defaults(func=_cmd_detect_anchors)

    p = add_verb("train-part", help="train a part detector with MIL")
    _add_common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--concept", required=True)
    p.add_argument("--variant", default="B+C+G", choices=["B", "B+C", "B+G", "B+C+G"])
    p.add_argument("--bank", type=Path, default=None)
    p.add_argument("--lam", type=float, default=1e-3)
    p.add_argument("--appearance-rounds", type=int, default=5)
    p.add_argument("--joint-rounds", type=int, default=5)
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--base-lr", type=float, default=1.0)
    p.add_argument("--context-scale", type=float, default=2.0)
    p.add_argument("--L", type=int, default=5)
    p.add_argument("--nms-iou", type=float, default=0.3)
    p.add_argument("--exemplar", default=None,
                   help="single strong annotation as image_id,x1,y1,x2,y2")
    p.add_argument("--beta", type=float, default=1.0)
    p.set_defaults(func=_cmd_train_part)

    p = add_verb("detect", help="detect parts with a trained model")
    _add_common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--bank", type=Path, default=None)
    p.add_argument("--concept", required=True)
    p.add_argument("--top-n", type=int, default=5)
    p.add_argument("--nms-iou", type=float, default=0.3)
    p.set_defaults(func=_cmd_detect)

    p = add_verb("eval", help="AP/CorLoc report with figures")
    _add_common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--detections", type=Path, nargs="+", required=True)
    p.add_argument("--iou-thresh", type=float, default=0.4)
    p.set_defaults(func=_cmd_eval)

    p = add_verb("match", help="semantic matching benchmark")
    _add_common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--bank", type=Path, required=True)
    p.add_argument("--variants", nargs="+", default=list(MATCH_VARIANTS),
                   choices=list(MATCH_VARIANTS))
    p.add_argument("--targets-per-image", type=int, default=3)
    p.add_argument("--L", type=int, default=5)
    p.add_argument("--nms-iou", type=float, default=0.3)
    p.add_argument("--raw", action="store_true", help="skip L2 normalization")
    p.set_defaults(func=_cmd_match)

    p = add_verb("grid-encode", help="spatial-grid anchor image encoding")
    _add_common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--bank", type=Path, required=True)
    p.set_defaults(func=_cmd_grid_encode)

    p = add_verb("atlas", help="export the navigable atlas graph")
    _add_common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--bank", type=Path, required=True)
    p.add_argument("--models", nargs="+", required=True, metavar="CONCEPT=PATH")
    p.add_argument("--top-edges", type=int, default=1)
    p.add_argument("--boxes-per-image", type=int, default=1)
    p.add_argument("--L", type=int, default=5)
    p.add_argument("--nms-iou", type=float, default=0.3)
    p.set_defaults(func=_cmd_atlas)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _apply_config_file(args, parser.verb_parsers[args.verb])
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except PartAtlasError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
