"""Scene preprocessing, network input items and point-limited batch stacking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..cloudstore import PointCloud, grid_subsample
from ..kpnet import KernelDisposition, LayerPlan, Pyramid, build_kernel_disposition, build_pyramid, input_features, stack_pyramids
from ..weaksup import SamplingStats, SubcloudSample, build_seed_grid, random_subclouds, sample_subclouds, scene_weak_label
from .config import Config


@dataclass
class SceneData:
    scene_id: str
    cloud: PointCloud  # grid-subsampled scene; labels are ground truth (or pseudo labels)
    subclouds: list[SubcloudSample]
    scene_label: np.ndarray | None


def prepare_scene(
    scene_id: str, raw: PointCloud, config: Config, stats: SamplingStats | None = None, subsample: bool = True
) -> SceneData:
    """Subsample to the first network level and cut the grid subclouds.

    Pass ``subsample=False`` for clouds already at that level (pseudo-label files).
    """
    cloud = grid_subsample(raw, config.cell).cloud if subsample else raw
    labeled = cloud.labels is not None and np.any(cloud.labels >= 0)
    grid = build_seed_grid(cloud, config.subcloud_radius)
    subs = sample_subclouds(cloud, grid, config.num_classes, labeled=labeled, stats=stats)
    label = scene_weak_label(cloud, config.num_classes) if labeled else None
    return SceneData(scene_id, cloud, subs, label)


@dataclass
class Item:
    scene: int
    sample: SubcloudSample
    pyramid: Pyramid
    features: np.ndarray
    target: np.ndarray  # weak label (classification) or per-point labels (segmentation)

    def __len__(self) -> int:
        return len(self.sample)


def disposition_for(plan: LayerPlan) -> KernelDisposition:
    return build_kernel_disposition(plan.kernel_points, plan.kernel_seed, plan.sigma)


def make_item(scene_index: int, cloud: PointCloud, sample: SubcloudSample, plan: LayerPlan, disp, target) -> Item:
    sub = cloud.subset(sample.member_indices)
    pyramid = build_pyramid(sub.positions, plan, disp)
    feats = input_features(sub, plan.black_indicator).data
    return Item(scene_index, sample, pyramid, feats, np.asarray(target))


def classification_items(
    scenes: Sequence[SceneData], plan: LayerPlan, level: str, rng: np.random.Generator | None = None
) -> list[Item]:
    """Training inputs for the classifier.

    ``subcloud`` level uses the grid subclouds and their own labels. ``scene``
    level draws as many random subclouds per scene and gives each the scene
    label.
    """
    disp = disposition_for(plan)
    items = []
    for k, scene in enumerate(scenes):
        if scene.scene_label is None:
            raise ValueError(f"{scene.scene_id}: labels are needed to derive weak labels")
        if level == "subcloud":
            samples = scene.subclouds
        elif level == "scene":
            if rng is None:
                raise ValueError("scene-level sampling needs an rng")
            samples = random_subclouds(
                scene.cloud, scene.subclouds[0].radius, len(scene.subclouds), rng, scene.scene_label
            )
        else:
            raise ValueError(f"unknown label level {level!r}")
        for s in samples:
            items.append(make_item(k, scene.cloud, s, plan, disp, s.weak_label))
    return items


def segmentation_items(scenes: Sequence[SceneData], plan: LayerPlan) -> list[Item]:
    disp = disposition_for(plan)
    items = []
    for k, scene in enumerate(scenes):
        if scene.cloud.labels is None:
            raise ValueError(f"{scene.scene_id}: no (pseudo) labels to train on")
        for s in scene.subclouds:
            items.append(make_item(k, scene.cloud, s, plan, disp, scene.cloud.labels[s.member_indices]))
    return items


@dataclass
class Batch:
    items: list
    lengths: list[int] = field(default_factory=list)
    offsets: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.lengths = [len(it) for it in self.items]
        self.offsets = list(np.concatenate([[0], np.cumsum(self.lengths)[:-1]]).astype(int))

    @property
    def num_points(self) -> int:
        return int(sum(self.lengths))

    def geometry(self) -> Pyramid:
        return stack_pyramids([it.pyramid for it in self.items])

    def features(self) -> np.ndarray:
        return np.vstack([it.features for it in self.items])

    def weak_labels(self) -> np.ndarray:
        return np.stack([it.target for it in self.items]).astype(np.float64)

    def point_labels(self) -> np.ndarray:
        return np.concatenate([it.target for it in self.items])


def stack_batch(samples: Sequence, limit: int) -> Batch:
    """Greedily take samples from the front until the next one would exceed ``limit``.

    A first sample larger than ``limit`` forms a batch on its own.
    """
    if limit <= 0:
        raise ValueError("batch point limit must be positive")
    taken = []
    total = 0
    for s in samples:
        if taken and total + len(s) > limit:
            break
        taken.append(s)
        total += len(s)
        if total >= limit:
            break
    return Batch(taken)


def make_batches(samples: Sequence, limit: int) -> list[Batch]:
    out = []
    rest = list(samples)
    while rest:
        batch = stack_batch(rest, limit)
        out.append(batch)
        rest = rest[len(batch.items) :]
    return out
