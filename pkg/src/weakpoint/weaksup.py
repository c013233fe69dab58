"""Subcloud sampling and cloud-level weak labels.

A subcloud is every point strictly inside a ball of radius ``r`` around a
seed. Seeds sit on a regular grid over the scene's bounding box with
``ceil(extent / r)`` seeds per axis, each at the centre of its grid cell, so
every point is within ``r * sqrt(3) / 2`` of some seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .cloudstore import KDTree, PointCloud


@dataclass(frozen=True)
class SubcloudSample:
    seed: np.ndarray
    radius: float
    member_indices: np.ndarray
    weak_label: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.member_indices)


@dataclass(frozen=True)
class SeedGrid:
    counts: tuple[int, int, int]
    axes: tuple[np.ndarray, np.ndarray, np.ndarray]
    lower: np.ndarray
    extent: np.ndarray
    radius: float

    @property
    def num_seeds(self) -> int:
        return self.counts[0] * self.counts[1] * self.counts[2]

    def seeds(self) -> np.ndarray:
        gx, gy, gz = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)


@dataclass
class SamplingStats:
    seeds: int = 0
    emitted: int = 0
    empty_dropped: int = 0


def seed_axis(lo: float, length: float, radius: float) -> np.ndarray:
    n = max(1, math.ceil(length / radius)) if length > 0 else 1
    if n == 1:
        return np.array([lo + 0.5 * length])
    step = length / n
    return lo + (np.arange(n) + 0.5) * step


def build_seed_grid(cloud: PointCloud, radius: float) -> SeedGrid:
    if radius <= 0:
        raise ValueError("radius must be positive")
    lo, hi = cloud.bounds()
    extent = hi - lo
    axes = tuple(seed_axis(float(lo[a]), float(extent[a]), radius) for a in range(3))
    return SeedGrid(tuple(len(a) for a in axes), axes, lo, extent, float(radius))


def weak_label_of(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Multi-hot vector of the classes present; unclassified points are ignored."""
    bits = np.zeros(num_classes, dtype=np.int8)
    valid = labels[labels >= 0]
    if np.any(valid >= num_classes):
        raise ValueError(f"label {int(valid.max())} out of range for {num_classes} classes")
    bits[valid] = 1
    return bits


def ball_members(tree: KDTree, seeds: np.ndarray, radius: float) -> list[np.ndarray]:
    q, s, _ = tree.query_radius(seeds, radius)
    order = np.lexsort((s, q))
    q, s = q[order], s[order]
    bounds = np.searchsorted(q, np.arange(len(seeds) + 1))
    return [s[bounds[k] : bounds[k + 1]] for k in range(len(seeds))]


def sample_subclouds(
    cloud: PointCloud,
    grid: SeedGrid,
    num_classes: int | None = None,
    labeled: bool = True,
    stats: SamplingStats | None = None,
) -> list[SubcloudSample]:
    """One subcloud per grid seed with at least one member.

    With ``labeled`` the weak label is derived from the members' ground
    truth, which then must exist.
    """
    if labeled and cloud.labels is None:
        raise ValueError("labelled subclouds requested but the cloud has no labels")
    if labeled and num_classes is None:
        num_classes = int(cloud.labels.max()) + 1
    seeds = grid.seeds()
    members = ball_members(KDTree(cloud.positions), seeds, grid.radius)
    out = []
    for seed, idx in zip(seeds, members):
        if idx.size == 0:
            if stats is not None:
                stats.empty_dropped += 1
            continue
        label = weak_label_of(cloud.labels[idx], num_classes) if labeled else None
        out.append(SubcloudSample(seed, grid.radius, idx, label))
    if stats is not None:
        stats.seeds += len(seeds)
        stats.emitted += len(out)
    return out


def random_subclouds(
    cloud: PointCloud,
    radius: float,
    count: int,
    rng: np.random.Generator,
    label: np.ndarray | None = None,
    max_tries: int = 1000,
) -> list[SubcloudSample]:
    """Subclouds around seeds drawn uniformly from the bounding box, rejecting empty balls.

    Used for scene-level training, where every sample carries ``label``.
    """
    lo, hi = cloud.bounds()
    tree = KDTree(cloud.positions)
    out: list[SubcloudSample] = []
    tries = 0
    while len(out) < count:
        tries += 1
        if tries > max_tries * count:
            raise RuntimeError("could not draw non-empty random subclouds")
        seed = rng.uniform(lo, hi)
        idx = ball_members(tree, seed[None, :], radius)[0]
        if idx.size:
            out.append(SubcloudSample(seed, float(radius), idx, None if label is None else label.copy()))
    return out


def scene_weak_label(cloud: PointCloud, num_classes: int) -> np.ndarray:
    if cloud.labels is None:
        raise ValueError("scene has no labels")
    if not np.any(cloud.labels >= 0):
        raise ValueError("every point is unclassified; no scene label")
    return weak_label_of(cloud.labels, num_classes)


def class_frequencies(labels) -> np.ndarray:
    """Fraction of samples whose weak label contains each class."""
    stacked = np.asarray(list(labels), dtype=np.float64)
    if stacked.ndim != 2 or stacked.shape[0] == 0:
        raise ValueError("class_frequencies needs a non-empty list of label vectors")
    return stacked.mean(axis=0)
