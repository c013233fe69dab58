"""Multi-path region mining over a point-convolution backbone.

Four classification heads share the backbone feature map ``A`` (N x C):

* ``plain``: ``A`` itself.
* ``spatial``: non-local attention across points, added back with a
  learnable scale that starts at zero.
* ``channel``: attention across channels of ``A`` (no projections), added
  back with its own zero-initialised scale.
* ``pointwise``: the spatial-style aggregation concatenated to ``A``.

Each head has a dropout + 1x1 classifier; averaging the per-point class
scores gives the logits trained with sigmoid cross-entropy against the weak
label. With dropout off, the same per-point scores masked by the weak label
are the point class activation maps (PCAMs) used for pseudo labels.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .cloudstore import PointCloud, nearest_index
from .kpnet import ClassificationBackbone, LayerPlan, Pyramid
from .numerics import Linear, Module, Tensor

PATHS = ("plain", "spatial", "channel", "pointwise")


@dataclass(frozen=True)
class ScoreMap:
    scores: np.ndarray  # N x num_classes
    positive: np.ndarray  # N x num_classes, True where the weak label allows the class
    path_id: str
    resolution: str = "coarse"

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        positive = np.broadcast_to(np.asarray(self.positive, dtype=bool), scores.shape).copy()
        if not np.all(np.isfinite(scores)):
            raise FloatingPointError(f"score map {self.path_id!r} has non-finite entries")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "positive", positive)

    @property
    def shape(self) -> tuple[int, int]:
        return self.scores.shape


@dataclass(frozen=True)
class PseudoLabel:
    labels: np.ndarray
    scores: np.ndarray


# ---------------------------------------------------------------------------
# attention paths


class SpatialAttention(Module):
    """Non-local attention over the points of one subcloud.

    ``B``, ``C`` and ``D`` are 1x1 projections to ``c1`` channels. The weight
    of source point ``i`` on target point ``j`` is ``softmax_i(C_i . B_j)``.
    The aggregated ``c1``-wide feature is projected back to ``c``.
    """

    def __init__(self, c: int, c1: int, rng: np.random.Generator):
        self.proj_b = Linear(c, c1, rng)
        self.proj_c = Linear(c, c1, rng)
        self.proj_d = Linear(c, c1, rng)
        self.proj_out = Linear(c1, c, rng)
        self.scale = Tensor(np.zeros(1), requires_grad=True)

    def attention_map(self, a: Tensor) -> Tensor:
        b = self.proj_b(a)
        c = self.proj_c(a)
        return nx.softmax_rows(nx.matmul(b, nx.transpose(c)))

    def aggregate(self, a: Tensor) -> Tensor:
        return self.proj_out(nx.matmul(self.attention_map(a), self.proj_d(a)))

    def __call__(self, a: Tensor) -> Tensor:
        return nx.add(nx.scale(self.aggregate(a), self.scale), a)


class ChannelAttention(Module):
    """Channel-to-channel attention: weights ``softmax_i(A_i . A_j)`` over channel columns."""

    def __init__(self):
        self.scale = Tensor(np.zeros(1), requires_grad=True)

    @staticmethod
    def attention_map(a: Tensor) -> Tensor:
        return nx.softmax_rows(nx.matmul(nx.transpose(a), a))

    def __call__(self, a: Tensor) -> Tensor:
        mixed = nx.matmul(a, nx.transpose(self.attention_map(a)))
        return nx.add(nx.scale(mixed, self.scale), a)


class PointwiseAttention(SpatialAttention):
    """Spatial-style aggregation concatenated in front of the input (width 2C)."""

    def __init__(self, c: int, c1: int, rng: np.random.Generator):
        super().__init__(c, c1, rng)
        del self.scale

    def __call__(self, a: Tensor) -> Tensor:
        return nx.concat([self.aggregate(a), a], axis=1)


def spatial_attention_forward(a: Tensor, state: SpatialAttention) -> Tensor:
    return state(a)


def channel_attention_forward(a: Tensor, state: ChannelAttention) -> Tensor:
    return state(a)


def pointwise_attention_forward(a: Tensor, state: PointwiseAttention) -> Tensor:
    return state(a)


def per_segment(fn, a: Tensor, lengths: Sequence[int]) -> Tensor:
    """Apply ``fn`` to each consecutive block of rows and restack the results."""
    if len(lengths) == 1:
        return fn(a)
    parts = []
    start = 0
    for n in lengths:
        parts.append(fn(nx.slice_rows(a, start, start + n)))
        start += n
    return nx.concat(parts, axis=0)


# ---------------------------------------------------------------------------
# heads, PCAMs and fusion


def classification_logits(
    path_feats: Tensor,
    classifier: Tensor,
    lengths: Sequence[int] | None = None,
    dropout_rate: float = 0.5,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Dropout, 1x1 classifier, then average pooling over each subcloud's points."""
    h = nx.dropout(path_feats, dropout_rate, training, rng)
    scores = nx.matmul(h, classifier)
    if lengths is None:
        return nx.global_average_pool(scores)
    return nx.segment_mean(scores, lengths)


def compute_pcam(path_feats, classifier, weak_label, path_id: str = "plain", resolution: str = "coarse") -> ScoreMap:
    """Per-point class scores with columns of absent classes zeroed."""
    y = np.asarray(weak_label).reshape(-1).astype(bool)
    if not y.any():
        raise ValueError("weak label has no positive class")
    f = path_feats.data if isinstance(path_feats, Tensor) else np.asarray(path_feats, dtype=np.float64)
    w = classifier.data if isinstance(classifier, Tensor) else np.asarray(classifier, dtype=np.float64)
    if w.shape[1] != y.size:
        raise nx.ShapeError(f"classifier has {w.shape[1]} classes, weak label {y.size}")
    scores = (f @ w) * y[None, :]
    return ScoreMap(scores, np.broadcast_to(y, scores.shape), path_id, resolution)


def fuse_pcams(maps: Sequence[ScoreMap], mode: str = "max") -> ScoreMap:
    if not maps:
        raise ValueError("nothing to fuse")
    first = maps[0]
    for m in maps[1:]:
        if m.shape != first.shape:
            raise nx.ShapeError(f"cannot fuse score maps of shapes {first.shape} and {m.shape}")
        if not np.array_equal(m.positive, first.positive):
            raise ValueError("score maps carry different weak-label masks")
    stack = np.stack([m.scores for m in maps])
    if mode == "max":
        fused = stack.max(axis=0)
    elif mode == "sum":
        fused = stack.sum(axis=0)
    else:
        raise ValueError(f"unknown fusion mode {mode!r}")
    return ScoreMap(fused, first.positive, "fused", first.resolution)


def upsample_map(scores: ScoreMap, fine_positions: np.ndarray, coarse_positions: np.ndarray) -> ScoreMap:
    idx = nearest_index(fine_positions, coarse_positions)
    return ScoreMap(scores.scores[idx], scores.positive[idx], scores.path_id, "fine")


def argmax_positive(scores: ScoreMap) -> PseudoLabel:
    """Per-row argmax restricted to allowed classes; ties go to the smallest id."""
    if not np.all(scores.positive.any(axis=1)):
        raise ValueError("a point has no positive class to choose from")
    masked = np.where(scores.positive, scores.scores, -np.inf)
    labels = np.argmax(masked, axis=1)
    return PseudoLabel(labels.astype(np.int64), masked[np.arange(len(labels)), labels])


def pseudo_labels_from_pcam(scores: ScoreMap, fine, coarse_positions: np.ndarray) -> PseudoLabel:
    fine_positions = fine.positions if isinstance(fine, PointCloud) else fine
    return argmax_positive(upsample_map(scores, fine_positions, coarse_positions))


def merge_overlapping_subclouds(num_points: int, per_subcloud: Sequence[tuple[np.ndarray, ScoreMap]]) -> ScoreMap:
    """Scene-level map: per point and class, the max over covering subclouds.

    Only subclouds whose weak label allows a class contribute to it; a class
    allowed by none of a point's subclouds stays masked at zero.
    """
    if not per_subcloud:
        raise ValueError("no subclouds to merge")
    num_classes = per_subcloud[0][1].shape[1]
    best = np.full((num_points, num_classes), -np.inf)
    covered = np.zeros(num_points, dtype=bool)
    for members, smap in per_subcloud:
        members = np.asarray(members, dtype=np.intp)
        if smap.shape != (len(members), num_classes):
            raise nx.ShapeError(f"score map {smap.shape} for {len(members)} members")
        vals = np.where(smap.positive, smap.scores, -np.inf)
        np.maximum.at(best, members, vals)
        covered[members] = True
    if not covered.all():
        hole = int(np.nonzero(~covered)[0][0])
        raise ValueError(f"point {hole} is not covered by any subcloud")
    positive = np.isfinite(best)
    return ScoreMap(np.where(positive, best, 0.0), positive, per_subcloud[0][1].path_id, "scene")


# ---------------------------------------------------------------------------
# the network


class MPRMNet(Module):
    def __init__(self, plan: LayerPlan, rng: np.random.Generator, paths: Sequence[str] = PATHS, dropout: float = 0.5):
        unknown = set(paths) - set(PATHS)
        if unknown or not paths:
            raise ValueError(f"paths must be a non-empty subset of {PATHS}, got {paths}")
        self.plan = plan
        self.paths = tuple(p for p in PATHS if p in paths)
        self.dropout = dropout
        self.rng = rng
        self.backbone = ClassificationBackbone(plan, rng)
        c = plan.widths[-1]
        c1 = max(c // plan.attention_reduction, 1)
        self.heads: dict[str, Module] = {}
        if "spatial" in self.paths:
            self.heads["spatial"] = SpatialAttention(c, c1, rng)
        if "channel" in self.paths:
            self.heads["channel"] = ChannelAttention()
        if "pointwise" in self.paths:
            self.heads["pointwise"] = PointwiseAttention(c, c1, rng)
        self.classifiers = {
            p: Linear(2 * c if p == "pointwise" else c, plan.num_classes, rng, bias=False, init="classifier")
            for p in self.paths
        }

    def path_features(self, geo: Pyramid, feats: Tensor) -> dict[str, Tensor]:
        a = self.backbone(geo, feats)
        lengths = geo.lengths[-1]
        out = {}
        for p in self.paths:
            out[p] = a if p == "plain" else per_segment(self.heads[p], a, lengths)
        return out

    def logits(self, geo: Pyramid, feats: Tensor) -> dict[str, Tensor]:
        lengths = geo.lengths[-1]
        return {
            p: classification_logits(f, self.classifiers[p].weight, lengths, self.dropout, self.training, self.rng)
            for p, f in self.path_features(geo, feats).items()
        }

    def loss(self, geo: Pyramid, feats: Tensor, targets: np.ndarray) -> tuple[Tensor, dict[str, float]]:
        """Sum of the per-path sigmoid cross-entropy losses."""
        parts = {p: nx.sigmoid_bce(z, targets) for p, z in self.logits(geo, feats).items()}
        total = None
        for t in parts.values():
            total = t if total is None else nx.add(total, t)
        return total, {p: float(t.data) for p, t in parts.items()}

    def pcams(self, geo: Pyramid, feats: Tensor, weak_labels: np.ndarray) -> list[dict[str, ScoreMap]]:
        """Per subcloud of the batch, one masked coarse-level score map per path (eval mode)."""
        was_training = self.training
        self.eval()
        try:
            pf = self.path_features(geo, feats)
        finally:
            self.train(was_training)
        lengths = geo.lengths[-1]
        out = []
        start = 0
        for b, n in enumerate(lengths):
            maps = {
                p: compute_pcam(f.data[start : start + n], self.classifiers[p].weight, weak_labels[b], p)
                for p, f in pf.items()
            }
            out.append(maps)
            start += n
        return out
