"""Pseudo-label generation, path ablations and segmenter inference."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..cloudstore import nearest_index
from ..crf import CrfConfig, crf_refine
from ..kpnet import SegmentationNet
from ..mprm import PATHS, MPRMNet, PseudoLabel, ScoreMap, argmax_positive, fuse_pcams, merge_overlapping_subclouds
from ..numerics import Tensor
from .data import Item, SceneData, make_batches, make_item, disposition_for
from .metrics import Metrics


def inference_items(scenes: Sequence[SceneData], plan, level: str = "subcloud", with_targets: bool = True) -> list[Item]:
    """Grid subclouds of every scene, labelled with the weak label used at PCAM time."""
    disp = disposition_for(plan)
    items = []
    for k, scene in enumerate(scenes):
        for s in scene.subclouds:
            if level == "scene":
                target = scene.scene_label
            else:
                target = s.weak_label
            if with_targets and target is None:
                raise ValueError(f"{scene.scene_id}: weak labels are needed to mask PCAMs")
            items.append(make_item(k, scene.cloud, s, plan, disp, target if target is not None else np.zeros(0)))
    return items


def collect_pcams(model: MPRMNet, items: Sequence[Item], batch_limit: int) -> list[dict[str, ScoreMap]]:
    """Coarse-level masked score maps per item and path, in item order."""
    out: list[dict[str, ScoreMap]] = []
    for batch in make_batches(list(items), batch_limit):
        out.extend(model.pcams(batch.geometry(), Tensor(batch.features()), batch.weak_labels()))
    return out


@dataclass
class ScenePseudo:
    scene_id: str
    labels: PseudoLabel
    scores: ScoreMap  # merged scene-level map before refinement


def scene_pseudo_labels(
    scene: SceneData,
    items: Sequence[Item],
    maps: Sequence[dict[str, ScoreMap]],
    paths: Sequence[str] = PATHS,
    fusion: str = "max",
    crf: CrfConfig | None = None,
) -> ScenePseudo:
    """Fuse paths per subcloud, upsample to full resolution, merge subclouds, take the argmax."""
    per_sub = []
    for item, m in zip(items, maps):
        missing = [p for p in paths if p not in m]
        if missing:
            raise ValueError(f"model has no {missing} path(s)")
        fused = fuse_pcams([m[p] for p in paths], fusion)
        geo = item.pyramid
        idx = nearest_index(geo.positions[0], geo.positions[-1])
        fine = ScoreMap(fused.scores[idx], fused.positive[idx], "fused", "fine")
        per_sub.append((item.sample.member_indices, fine))
    merged = merge_overlapping_subclouds(len(scene.cloud), per_sub)
    if crf is not None:
        labels = crf_refine(scene.cloud, merged, crf)
    else:
        labels = argmax_positive(merged)
    return ScenePseudo(scene.scene_id, labels, merged)


def _group(items: Sequence[Item], maps: Sequence, num_scenes: int):
    grouped = [([], []) for _ in range(num_scenes)]
    for item, m in zip(items, maps):
        grouped[item.scene][0].append(item)
        grouped[item.scene][1].append(m)
    return grouped


def generate_pseudo_labels(
    model: MPRMNet,
    scenes: Sequence[SceneData],
    level: str = "subcloud",
    paths: Sequence[str] = PATHS,
    fusion: str = "max",
    crf: CrfConfig | None = None,
    batch_limit: int = 6000,
    num_classes: int | None = None,
) -> tuple[list[ScenePseudo], Metrics | None]:
    """Pseudo labels for every scene, plus metrics against ground truth when available."""
    items = inference_items(scenes, model.plan, level)
    maps = collect_pcams(model, items, batch_limit)
    num_classes = num_classes or model.plan.num_classes
    metrics = Metrics.empty(num_classes)
    scored = False
    out = []
    for scene, (its, ms) in zip(scenes, _group(items, maps, len(scenes))):
        res = scene_pseudo_labels(scene, its, ms, paths, fusion, crf)
        out.append(res)
        if scene.cloud.labels is not None:
            metrics.update(res.labels.labels, scene.cloud.labels)
            scored = True
    return out, metrics if scored else None


def ablation_settings(available: Sequence[str]) -> list[tuple[str, tuple[str, ...], str]]:
    """Each single path, plain paired with every other path, all paths with max and with sum."""
    settings = [(p, (p,), "max") for p in available]
    if "plain" in available:
        for p in available:
            if p != "plain":
                settings.append((f"plain+{p}", ("plain", p), "max"))
    if len(available) > 2:
        settings.append(("all (max)", tuple(available), "max"))
    if len(available) > 1:
        settings.append(("all (sum)", tuple(available), "sum"))
    return settings


def run_ablation(
    model: MPRMNet,
    scenes: Sequence[SceneData],
    level: str = "subcloud",
    batch_limit: int = 6000,
    crf: CrfConfig | None = None,
) -> list[dict]:
    """Pseudo-label mIoU for every path combination of one trained model."""
    items = inference_items(scenes, model.plan, level)
    maps = collect_pcams(model, items, batch_limit)
    grouped = _group(items, maps, len(scenes))
    rows = []
    for name, paths, fusion in ablation_settings(model.paths):
        metrics = Metrics.empty(model.plan.num_classes)
        for scene, (its, ms) in zip(scenes, grouped):
            res = scene_pseudo_labels(scene, its, ms, paths, fusion, crf)
            metrics.update(res.labels.labels, scene.cloud.labels)
        rows.append({"setting": name, "paths": list(paths), "fusion": fusion, "miou": metrics.miou, "iou": metrics.iou.tolist()})
    return rows


def predict_scene_labels(model: SegmentationNet, scenes: Sequence[SceneData], batch_limit: int = 6000) -> list[np.ndarray]:
    """Per-point class of every scene: softmax per subcloud, max probability across overlaps."""
    items = inference_items(scenes, model.plan, with_targets=False)
    model.eval()
    probs = [np.full((len(s.cloud), model.plan.num_classes), -1.0) for s in scenes]
    for batch in make_batches(items, batch_limit):
        logits = model(batch.geometry(), Tensor(batch.features())).data
        z = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        for item, off, n in zip(batch.items, batch.offsets, batch.lengths):
            np.maximum.at(probs[item.scene], item.sample.member_indices, p[off : off + n])
    out = []
    for s, p in zip(scenes, probs):
        if np.any(p[:, 0] < 0):
            raise ValueError(f"{s.scene_id}: some points are outside every subcloud")
        out.append(np.argmax(p, axis=1).astype(np.int64))
    return out
