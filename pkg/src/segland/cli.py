"""Command-line pipeline: synth, prepare, train-base, train-ensemble,
update-novel, predict, fuse, evaluate, plot. Stages communicate only via
file artifacts; every output directory gets one run manifest."""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from segland.core import (
    ClassTaxonomy,
    LabelMap,
    canonical_json,
    load_checkpoint,
    save_checkpoint,
    validate_taxonomy,
)
from segland.data import compute_class_frequencies, compute_class_weights, load_dataset
from segland.ensemble import (
    LearnerSpec,
    average_fusion,
    check_ensemble_specs,
    load_probability_map,
    save_probability_map,
    train_base_learner,
)
from segland.errors import (
    DigestMismatchError,
    MissingArtifactError,
    SeglandError,
)
from segland.evaluation import (
    ConfusionMatrix,
    accumulate_confusion,
    evaluation_report,
    plot_report,
)
from segland.fusion import FusionConfig, ultimate_fuse
from segland.model import run_inference
from segland.synth import generate_dataset, make_taxonomy
from segland.training import (
    TrainConfig,
    extractor_from_checkpoint,
    train_base_phase,
    update_novel_phase,
)

DEFAULT_ENSEMBLE_ARCHS = ("ref-tiny", "ref-small", "ref-mid", "ref-wide")


def _utc_now():
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _write_json(path, obj):
    Path(path).write_text(canonical_json(obj) + "\n", encoding="utf-8")


def _write_manifest(out_dir, command, args, extra=None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "args": {k: str(v) for k, v in sorted(args.items())},
        "created_utc": _utc_now(),
    }
    if extra:
        manifest.update(extra)
    _write_json(out_dir / "manifest.json", manifest)


def _read_manifest(directory):
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise MissingArtifactError(f"{directory} has no manifest.json")
    return json.loads(path.read_text(encoding="utf-8"))


def _load_taxonomy(path) -> ClassTaxonomy:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"taxonomy file {path} does not exist")
    taxonomy = ClassTaxonomy.from_json_dict(json.loads(path.read_text(encoding="utf-8")))
    validate_taxonomy(taxonomy)
    return taxonomy


def _load_train_config(path, seed=None) -> TrainConfig:
    if path:
        config = TrainConfig.from_json_dict(json.loads(Path(path).read_text(encoding="utf-8")))
    else:
        config = TrainConfig()
    if seed is not None:
        config = replace(config, seed=seed)
    return config


def cmd_synth(args):
    taxonomy = make_taxonomy(args.base_classes, args.novel_classes, phase="phase1")
    summary = generate_dataset(
        args.out, args.n_tiles, args.size, taxonomy, args.seed,
        shots=args.shots, n_test=args.n_test, n_query=args.n_query,
    )
    out = Path(args.out)
    _write_json(out / "taxonomy.json", taxonomy.to_json_dict())
    base_taxonomy = ClassTaxonomy.from_json_dict(summary["base_taxonomy"])
    _write_json(out / "taxonomy_base.json", base_taxonomy.to_json_dict())
    _write_manifest(out, "synth", vars(args), extra={"summary": summary})
    print(f"wrote {summary['splits']} under {out}")


def cmd_prepare(args):
    taxonomy = _load_taxonomy(args.taxonomy)
    tiles = load_dataset(args.data_root, args.split, taxonomy)
    freqs = compute_class_frequencies(tiles, taxonomy)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "frequencies.json", freqs.to_json_dict())
    artifacts = {"frequencies": "frequencies.json"}
    if args.mode != "none":
        weights = compute_class_weights(freqs, args.mode)
        _write_json(out / "weights.json", weights.to_json_dict())
        artifacts["weights"] = "weights.json"
    _write_manifest(out, "prepare", vars(args), extra={
        "taxonomy_digest": taxonomy.digest(), "artifacts": artifacts,
    })
    print(f"class statistics written to {out}")


def cmd_train_base(args):
    taxonomy = _load_taxonomy(args.taxonomy)
    config = _load_train_config(args.config, args.seed)
    tiles = load_dataset(args.data_root, "base-train", taxonomy)
    ckpt = train_base_phase(tiles, taxonomy, config)
    out = Path(args.out)
    save_checkpoint(ckpt, out)
    _write_json(out / "config.json", config.to_json_dict())
    _write_manifest(out, "train-base", vars(args), extra={
        "config_digest": config.digest(), "taxonomy_digest": taxonomy.digest(),
    })
    print(f"phase-1 checkpoint at {out} (digest {config.digest()[:12]})")


def cmd_train_ensemble(args):
    taxonomy = _load_taxonomy(args.taxonomy)
    config = _load_train_config(args.config, args.seed)
    archs = args.archs.split(",") if args.archs else list(DEFAULT_ENSEMBLE_ARCHS)
    if args.seeds:
        seeds = [int(s) for s in args.seeds.split(",")]
        if len(seeds) != len(archs):
            raise ValueError("--seeds must list one seed per arch")
    else:
        seeds = [config.seed + i for i in range(len(archs))]
    out = Path(args.out)
    specs = []
    for i, (arch, seed) in enumerate(zip(archs, seeds)):
        learner_dir = out / f"learner_{i:02d}"
        specs.append(LearnerSpec(
            arch_id=arch,
            config=replace(config, seed=seed),
            checkpoint_path=str(learner_dir),
        ))
    check_ensemble_specs(specs)
    tiles = load_dataset(args.data_root, "base-train", taxonomy)
    digests = {}
    for spec in specs:
        ckpt = train_base_learner(spec, tiles, taxonomy)
        save_checkpoint(ckpt, spec.checkpoint_path)
        _write_json(Path(spec.checkpoint_path) / "config.json", spec.config.to_json_dict())
        digests[Path(spec.checkpoint_path).name] = ckpt.config_digest
        print(f"learner {spec.arch_id} seed {spec.config.seed} -> {spec.checkpoint_path}")
    _write_manifest(out, "train-ensemble", vars(args), extra={
        "learners": digests, "taxonomy_digest": taxonomy.digest(),
    })


def cmd_update_novel(args):
    ckpt = load_checkpoint(args.checkpoint)
    taxonomy = _load_taxonomy(args.taxonomy)
    config = _load_train_config(args.config, args.seed)
    support = load_dataset(args.data_root, "support", taxonomy)
    mix_pool = None
    if args.mix_root:
        mix_pool = load_dataset(args.mix_root, "base-train", ckpt.taxonomy)
    updated = update_novel_phase(ckpt, support, taxonomy, config, mix_pool=mix_pool)
    out = Path(args.out)
    save_checkpoint(updated, out)
    _write_json(out / "config.json", config.to_json_dict())
    _write_manifest(out, "update-novel", vars(args), extra={
        "config_digest": config.digest(),
        "derived_from": ckpt.config_digest,
        "taxonomy_digest": taxonomy.digest(),
    })
    print(f"phase-2 checkpoint at {out} (+{len(taxonomy.novel_ids)} novel rows)")


def _learner_dirs(ckpt_path):
    ckpt_path = Path(ckpt_path)
    if (ckpt_path / "meta.json").exists():
        return [ckpt_path]
    dirs = sorted(p for p in ckpt_path.iterdir()
                  if p.is_dir() and (p / "meta.json").exists())
    if not dirs:
        raise MissingArtifactError(f"{ckpt_path} holds no checkpoint")
    return dirs


def cmd_predict(args):
    dirs = _learner_dirs(args.checkpoint)
    ckpts = [load_checkpoint(d) for d in dirs]
    taxonomy = ckpts[0].taxonomy
    for c in ckpts[1:]:
        if c.taxonomy.digest() != taxonomy.digest():
            raise DigestMismatchError("ensemble members disagree on the taxonomy")
    extractors = [extractor_from_checkpoint(c) for c in ckpts]
    tiles = load_dataset(args.data_root, args.split, taxonomy, with_labels=False)
    out = Path(args.out)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    (out / "probs").mkdir(parents=True, exist_ok=True)
    tile_ids = []
    for tile in tiles:
        maps = [run_inference(ext, c.bank, tile.image)[0]
                for ext, c in zip(extractors, ckpts)]
        fused = average_fusion(maps)
        labels = np.argmax(fused.probs, axis=2).astype(np.uint8)
        Image.fromarray(labels).save(out / "labels" / f"{tile.id}.png")
        save_probability_map(fused, out / "probs" / tile.id, taxonomy)
        tile_ids.append(tile.id)
    _write_manifest(out, "predict", vars(args), extra={
        "taxonomy_digest": taxonomy.digest(),
        "checkpoint_digests": [c.config_digest for c in ckpts],
        "n_tiles": len(tile_ids),
    })
    print(f"predicted {len(tile_ids)} tiles with {len(ckpts)} model(s) -> {out}")


def _load_pred_labels(directory):
    labels_dir = Path(directory) / "labels"
    if not labels_dir.is_dir():
        raise MissingArtifactError(f"{directory} has no labels/ subdirectory")
    out = {}
    for path in sorted(labels_dir.glob("*.png")):
        with Image.open(path) as img:
            out[path.stem] = LabelMap(labels=np.asarray(img))
    return out


def cmd_fuse(args):
    taxonomy = _load_taxonomy(args.taxonomy)
    pop_manifest = _read_manifest(args.pop_pred)
    if pop_manifest.get("taxonomy_digest") != taxonomy.digest():
        raise DigestMismatchError("prototype predictions were made under a different taxonomy")
    ens_manifest = _read_manifest(args.ensemble_pred)
    ens_labels = _load_pred_labels(args.ensemble_pred)
    pop_labels = _load_pred_labels(args.pop_pred)
    missing = sorted(set(pop_labels) - set(ens_labels))
    if missing:
        raise MissingArtifactError(f"ensemble predictions missing for tiles {missing}")
    config = FusionConfig(kernel=args.kernel, min_region=args.min_region, mode=args.mode)
    out = Path(args.out)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    for tile_id, pop in sorted(pop_labels.items()):
        fused = ultimate_fuse(ens_labels[tile_id], pop, taxonomy, config)
        Image.fromarray(fused.labels).save(out / "labels" / f"{tile_id}.png")
    _write_manifest(out, "fuse", vars(args), extra={
        "taxonomy_digest": taxonomy.digest(),
        "fusion_config": config.to_json_dict(),
        "ensemble_taxonomy_digest": ens_manifest.get("taxonomy_digest"),
        "n_tiles": len(pop_labels),
    })
    print(f"fused {len(pop_labels)} tiles -> {out}")


def cmd_evaluate(args):
    taxonomy = _load_taxonomy(args.taxonomy)
    pred_manifest = _read_manifest(args.pred)
    if pred_manifest.get("taxonomy_digest") != taxonomy.digest():
        raise DigestMismatchError(
            "prediction taxonomy digest does not match the evaluation taxonomy"
        )
    preds = _load_pred_labels(args.pred)
    truth_tiles = load_dataset(args.data_root, args.split, taxonomy)
    cm = ConfusionMatrix.zeros(taxonomy.num_classes)
    for tile in truth_tiles:
        if tile.id not in preds:
            raise MissingArtifactError(f"no prediction for tile {tile.id}")
        truth = LabelMap(labels=tile.label)
        cm = cm.merged(accumulate_confusion(preds[tile.id], truth, taxonomy.num_classes))
    report = evaluation_report(cm, taxonomy)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "report.json", report)
    _write_manifest(out, "evaluate", vars(args), extra={
        "taxonomy_digest": taxonomy.digest(),
    })
    base = report["base_miou"]
    novel = report["novel_miou"]
    total = report["total_score_percent"]
    print(f"base mIoU:  {base if base is not None else 'n/a'}")
    print(f"novel mIoU: {novel if novel is not None else 'n/a'}")
    print(f"total:      {total if total is not None else 'n/a'}")


def cmd_plot(args):
    report_path = Path(args.report)
    if not report_path.exists():
        raise MissingArtifactError(f"report {report_path} does not exist")
    report = json.loads(report_path.read_text(encoding="utf-8"))
    written = plot_report(report, args.out)
    _write_manifest(args.out, "plot", vars(args))
    for path in written:
        print(f"wrote {path}")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="segland",
        description="Generalized few-shot land-cover segmentation pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-tiles", type=int, default=40)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--base-classes", type=int, default=3)
    p.add_argument("--novel-classes", type=int, default=1)
    p.add_argument("--shots", type=int, default=5)
    p.add_argument("--n-test", type=int, default=10)
    p.add_argument("--n-query", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", help="class frequencies and balanced weights")
    p.add_argument("--data-root", required=True)
    p.add_argument("--taxonomy", required=True)
    p.add_argument("--split", default="base-train")
    p.add_argument("--mode", default="inverse-sqrt",
                   choices=["inverse", "inverse-sqrt", "none"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train-base", help="phase-1 base-class training")
    p.add_argument("--data-root", required=True)
    p.add_argument("--taxonomy", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_base)

    p = sub.add_parser("train-ensemble", help="train independent base learners")
    p.add_argument("--data-root", required=True)
    p.add_argument("--taxonomy", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--archs", default=None,
                   help="comma-separated encoder arch ids")
    p.add_argument("--seeds", default=None,
                   help="comma-separated seeds, one per arch")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_ensemble)

    p = sub.add_parser("update-novel", help="phase-2 novel-class updating")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-root", required=True, help="support-set root")
    p.add_argument("--taxonomy", required=True)
    p.add_argument("--mix-root", default=None,
                   help="base-train root supplying NovelCutMix backgrounds")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_update_novel)

    p = sub.add_parser("predict", help="per-tile probabilities and labels")
    p.add_argument("--checkpoint", required=True,
                   help="checkpoint dir, or an ensemble dir of checkpoints")
    p.add_argument("--data-root", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("fuse", help="decision-level fusion of ensemble and prototype maps")
    p.add_argument("--ensemble-pred", required=True)
    p.add_argument("--pop-pred", required=True)
    p.add_argument("--taxonomy", required=True)
    p.add_argument("--kernel", type=int, default=3)
    p.add_argument("--min-region", type=int, default=16)
    p.add_argument("--mode", default="replace-base",
                   choices=["replace-base", "intersect-base"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("evaluate", help="IoU metrics and the total score")
    p.add_argument("--pred", required=True)
    p.add_argument("--data-root", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--taxonomy", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("plot", help="render evaluation plots")
    p.add_argument("--report", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv=None):
    workers = max(1, int(os.environ.get("SEGLAND_NUM_WORKERS", "1")))
    torch.set_num_threads(workers)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except SeglandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
