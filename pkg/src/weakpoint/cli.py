"""``weakpoint`` command line.

Exit codes: 0 success, 2 usage or configuration error, 3 data error
(unreadable input, checkpoint mismatch), 4 numeric failure (divergence, NaN).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .cloudstore import CloudFormatError, load_cloud, save_cloud
from .crf import CrfConfig, crf_refine
from .kpnet import CheckpointError, SegmentationNet, load_checkpoint, load_state, save_checkpoint, state_dict
from .mprm import PATHS, MPRMNet
from .pipeline.config import Config, ConfigError, config_from_mapping, dump_config, load_config, parse_key_values
from .pipeline.data import classification_items, prepare_scene, segmentation_items
from .pipeline.exports import (
    class_names,
    load_scenes,
    read_scores,
    scores_from_labels,
    write_json,
    write_pseudo_labels,
    write_weak_labels,
)
from .pipeline.metrics import Metrics
from .pipeline.pseudo import generate_pseudo_labels, predict_scene_labels, run_ablation
from .pipeline.scenes import generate_rooms
from .weaksup import SamplingStats, class_frequencies

log = logging.getLogger("weakpoint")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


class UsageError(Exception):
    pass


def _config(args) -> Config:
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    return load_config(args.config, overrides)


def _prepared(directory, cfg: Config, stats: SamplingStats | None = None):
    return [prepare_scene(name, cloud, cfg, stats) for name, cloud in load_scenes(directory)]


def _model_from_checkpoint(path, expected_kind: str):
    plan, params, extra = load_checkpoint(path)
    if plan.kind != expected_kind:
        raise CheckpointError(f"{path}: holds a {plan.kind} network, expected {expected_kind}")
    cfg = config_from_mapping(parse_key_values(extra.get("config", "")))
    if cfg.classifier_plan().digest() != plan.digest() and cfg.segmenter_plan().digest() != plan.digest():
        raise CheckpointError(f"{path}: stored configuration does not reproduce the layer plan")
    rng = np.random.default_rng(0)
    if expected_kind == "classifier":
        model = MPRMNet(plan, rng, tuple(extra.get("paths", PATHS)), cfg.dropout)
    else:
        model = SegmentationNet(plan, rng)
    load_state(model, params)
    model.eval()
    return model, cfg, extra


def _paths_arg(text: str | None, default) -> tuple[str, ...]:
    if text is None:
        return tuple(default)
    if text == "all":
        return PATHS
    paths = tuple(p.strip() for p in text.split(",") if p.strip())
    bad = [p for p in paths if p not in PATHS]
    if bad or not paths:
        raise UsageError(f"--paths must name some of {','.join(PATHS)} (or 'all'), got {text!r}")
    return paths


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_scenes(args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, cloud, recipe in generate_rooms(args.count, args.seed, num_classes=args.num_classes, density=args.density):
        save_cloud(cloud, out / f"{name}.tsv")
        write_json(out / f"{name}.recipe.json", recipe)
    log.info("wrote %d scenes to %s", args.count, out)


def cmd_weaklabel(args) -> None:
    cfg = _config(args)
    stats = SamplingStats()
    scenes = _prepared(args.scenes, cfg, stats)
    records, scene_labels, sub_labels = [], [], []
    for s in scenes:
        if s.scene_label is None:
            raise CloudFormatError(f"{s.scene_id}: ground-truth labels are needed to derive weak labels")
        scene_labels.append(s.scene_label)
        for sub in s.subclouds:
            bits = s.scene_label if args.level == "scene" else sub.weak_label
            sub_labels.append(sub.weak_label)
            records.append(
                {
                    "scene_id": s.scene_id,
                    "seed": [float(v) for v in sub.seed],
                    "radius": sub.radius,
                    "label_bits": [int(b) for b in bits],
                    "member_count": len(sub),
                }
            )
    write_weak_labels(args.out, records)
    names = class_names(cfg.num_classes)
    scene_freq = class_frequencies(scene_labels)
    sub_freq = class_frequencies(sub_labels)
    stem = Path(args.out).with_suffix("")
    lines = ["class\tscene_frequency\tsubcloud_frequency"]
    lines += [f"{n}\t{a:.4f}\t{b:.4f}" for n, a, b in zip(names, scene_freq, sub_freq)]
    Path(f"{stem}.frequencies.tsv").write_text("\n".join(lines) + "\n")
    write_json(
        f"{stem}.stats.json",
        {
            "scenes": len(scenes),
            "subclouds": stats.emitted,
            "empty_seeds_dropped": stats.empty_dropped,
            "mean_subclouds_per_scene": stats.emitted / max(len(scenes), 1),
        },
    )
    from .pipeline.report import plot_class_frequencies

    plot_class_frequencies(scene_freq, sub_freq, names, f"{stem}.frequencies.png")
    log.info("%d subclouds over %d scenes (%.1f per scene)", stats.emitted, len(scenes), stats.emitted / len(scenes))


def cmd_train_cls(args) -> None:
    cfg = _config(args)
    if args.level:
        cfg = cfg.replace(label_level=args.level)
    if args.epochs is not None:
        cfg = cfg.replace(cls_epochs=args.epochs)
    if args.paths:
        cfg = cfg.replace(train_paths=_paths_arg(args.paths, PATHS))
    scenes = _prepared(args.scenes, cfg)
    items = classification_items(scenes, cfg.classifier_plan(), cfg.label_level, np.random.default_rng(cfg.seed + 7))
    log.info("training classifier on %d subclouds from %d scenes", len(items), len(scenes))
    from .pipeline.train import train_classifier

    model, history = train_classifier(items, cfg)
    extra = {"config": dump_config(cfg), "paths": list(model.paths), "level": cfg.label_level}
    save_checkpoint(args.out, model.plan, state_dict(model), extra)
    stem = Path(args.out).with_suffix("")
    write_json(f"{stem}.log.json", history.to_dict())
    from .pipeline.report import plot_loss_curve

    plot_loss_curve(history.epoch_loss, f"{stem}.loss.png", history.path_loss, "classifier loss")


def cmd_pcam(args) -> None:
    model, cfg, extra = _model_from_checkpoint(args.checkpoint, "classifier")
    paths = _paths_arg(args.paths, cfg.paths)
    missing = [p for p in paths if p not in model.paths]
    if missing:
        raise UsageError(f"checkpoint was trained without path(s) {','.join(missing)}")
    fusion = args.fusion or cfg.fusion
    use_crf = cfg.crf if args.crf is None else args.crf
    level = extra.get("level", cfg.label_level)
    scenes = _prepared(args.scenes, cfg)
    results, metrics = generate_pseudo_labels(
        model, scenes, level, paths, fusion, cfg.crf_config() if use_crf else None, cfg.batch_limit, cfg.num_classes
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    per_scene = {}
    for scene, res in zip(scenes, results):
        write_pseudo_labels(out, scene.scene_id, scene.cloud, res.labels.labels, res.scores, cfg.num_classes)
        if scene.cloud.labels is not None:
            per_scene[scene.scene_id] = Metrics.empty(cfg.num_classes).update(res.labels.labels, scene.cloud.labels).miou
    names = class_names(cfg.num_classes)
    payload = {"paths": list(paths), "fusion": fusion, "crf": bool(use_crf), "level": level}
    if metrics is not None:
        payload.update(metrics.to_dict(names))
        payload["per_scene_miou"] = per_scene
        from .pipeline.report import plot_class_iou

        plot_class_iou([payload["per_class_iou"][n] for n in names], names, out / "metrics.png", "pseudo-label IoU")
    write_json(out / "metrics.json", payload)
    if metrics is not None:
        log.info("pseudo-label mIoU %.4f", metrics.miou)


def cmd_refine(args) -> None:
    cfg = _config(args)
    crf_cfg = cfg.crf_config()
    if args.crf_config:
        try:
            crf_cfg = CrfConfig.from_mapping(parse_key_values(Path(args.crf_config).read_text(), args.crf_config))
        except (KeyError, ValueError) as exc:
            raise UsageError(f"{args.crf_config}: {exc}") from None
    cloud = load_cloud(args.input)
    if cloud.labels is None:
        raise CloudFormatError(f"{args.input}: no label column to refine")
    scores = read_scores(args.scores) if args.scores else scores_from_labels(cloud.labels, cfg.num_classes)
    if scores.shape[0] != len(cloud):
        raise CloudFormatError(f"{args.scores}: {scores.shape[0]} rows for {len(cloud)} points")
    refined = crf_refine(cloud, scores, crf_cfg)
    save_cloud(cloud.with_labels(refined.labels), args.out)


def cmd_train_seg(args) -> None:
    cfg = _config(args)
    if args.epochs is not None:
        cfg = cfg.replace(seg_epochs=args.epochs)
    scenes = [prepare_scene(name, cloud, cfg, subsample=False) for name, cloud in load_scenes(args.pseudo)]
    items = segmentation_items(scenes, cfg.segmenter_plan())
    from .pipeline.train import train_segmenter

    model, history = train_segmenter(items, cfg)
    save_checkpoint(args.out, model.plan, state_dict(model), {"config": dump_config(cfg)})
    stem = Path(args.out).with_suffix("")
    write_json(f"{stem}.log.json", history.to_dict())
    from .pipeline.report import plot_loss_curve

    plot_loss_curve(history.epoch_loss, f"{stem}.loss.png", title="segmentation loss")


def cmd_eval(args) -> None:
    model, cfg, _ = _model_from_checkpoint(args.checkpoint, "segmenter")
    scenes = _prepared(args.scenes, cfg)
    preds = predict_scene_labels(model, scenes, cfg.batch_limit)
    metrics = Metrics.empty(cfg.num_classes)
    for scene, pred in zip(scenes, preds):
        if scene.cloud.labels is None:
            raise CloudFormatError(f"{scene.scene_id}: evaluation needs ground-truth labels")
        metrics.update(pred, scene.cloud.labels)
    names = class_names(cfg.num_classes)
    payload = metrics.to_dict(names)
    write_json(args.out, payload)
    from .pipeline.report import plot_class_iou

    plot_class_iou([payload["per_class_iou"][n] for n in names], names, Path(args.out).with_suffix(".png"), "segmentation IoU")
    log.info("mIoU %.4f", metrics.miou)


def cmd_ablate(args) -> None:
    model, cfg, extra = _model_from_checkpoint(args.checkpoint, "classifier")
    use_crf = bool(args.crf)
    scenes = _prepared(args.scenes, cfg)
    rows = run_ablation(model, scenes, extra.get("level", cfg.label_level), cfg.batch_limit, cfg.crf_config() if use_crf else None)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names = class_names(cfg.num_classes)
    lines = ["setting\tfusion\tmiou\t" + "\t".join(names)]
    for r in rows:
        ious = "\t".join("nan" if v is None or v != v else f"{v:.4f}" for v in r["iou"])
        lines.append(f"{r['setting']}\t{r['fusion']}\t{r['miou']:.4f}\t{ious}")
    (out / "ablation.tsv").write_text("\n".join(lines) + "\n")
    write_json(out / "ablation.json", {"crf": use_crf, "rows": rows})
    from .pipeline.report import plot_ablation

    plot_ablation(rows, out / "ablation.png")


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="weakpoint", description="Weakly supervised point-cloud segmentation.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one setting")
        return p

    p = sub.add_parser("gen-scenes", help="generate synthetic labelled rooms")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--num-classes", type=int, default=4)
    p.add_argument("--density", type=float, default=25.0, help="points per square metre")
    p.set_defaults(func=cmd_gen_scenes)

    p = with_config(sub.add_parser("weaklabel", help="derive subcloud weak labels (JSON lines)"))
    p.add_argument("--scenes", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--level", choices=("scene", "subcloud"), default="subcloud")
    p.set_defaults(func=cmd_weaklabel)

    p = with_config(sub.add_parser("train-cls", help="train the multi-path classifier"))
    p.add_argument("--scenes", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--level", choices=("scene", "subcloud"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--paths", help="heads to train, comma separated (default: all four)")
    p.set_defaults(func=cmd_train_cls)

    p = sub.add_parser("pcam", help="generate pseudo labels from a trained classifier")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scenes", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--paths", help="paths to fuse, comma separated or 'all'")
    p.add_argument("--fusion", choices=("max", "sum"))
    p.add_argument("--crf", dest="crf", action="store_true", default=None)
    p.add_argument("--no-crf", dest="crf", action="store_false")
    p.set_defaults(func=cmd_pcam)

    p = with_config(sub.add_parser("refine", help="dense-CRF refinement of a pseudo-label file"))
    p.add_argument("--input", required=True)
    p.add_argument("--scores", help="scores TSV written by pcam")
    p.add_argument("--crf-config", help="key = value file with w1, theta_alpha, theta_beta, w2, theta_gamma, iterations")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_refine)

    p = with_config(sub.add_parser("train-seg", help="train the segmentation network on pseudo labels"))
    p.add_argument("--pseudo", required=True, help="directory of pseudo-labelled TSV files")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train_seg)

    p = sub.add_parser("eval", help="evaluate a segmentation checkpoint against ground truth")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scenes", required=True)
    p.add_argument("--out", required=True, help="metrics JSON path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="pseudo-label mIoU for each path combination")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scenes", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--crf", action="store_true")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"weakpoint: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"weakpoint: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CloudFormatError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"weakpoint: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
