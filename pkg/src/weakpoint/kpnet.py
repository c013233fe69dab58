"""Rigid kernel-point convolution and the two point networks built from it.

Geometry never changes during training, so everything derived from point
positions (subsampled levels, neighbour lists, kernel influence weights,
pooling and upsampling indices) is precomputed once per subcloud as a
:class:`Pyramid`. Pyramids of several subclouds stack into one block-diagonal
batch pyramid, which keeps every neighbourhood inside its own subcloud.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import numerics as nx
from .cloudstore import NeighborIndex, PointCloud, grid_subsample, nearest_index, radius_neighbors
from .numerics import Linear, Module, Tensor

CHECKPOINT_MAGIC = b"WKPNTCK1"


class CheckpointError(ValueError):
    """Checkpoint is unreadable or does not match the expected layer plan."""


# ---------------------------------------------------------------------------
# kernel dispositions


@dataclass(frozen=True)
class KernelDisposition:
    points: np.ndarray  # K x 3, inside the unit ball, row 0 at the origin
    sigma: float  # influence distance, in units of the convolution radius

    @property
    def size(self) -> int:
        return self.points.shape[0]


def build_kernel_disposition(
    k: int, seed: int = 0, sigma: float = 0.3, iterations: int = 400, extent: float = 0.7
) -> KernelDisposition:
    """Origin plus ``k - 1`` points spread by repulsion inside the unit ball.

    After relaxation the outer points are rescaled to norm ``extent`` so that
    their influence zones (width ``sigma``) still cover the ball interior.
    """
    if k < 1:
        raise ValueError("need at least one kernel point")
    rng = np.random.default_rng(seed)
    if k == 1:
        return KernelDisposition(np.zeros((1, 3)), sigma)
    free = rng.normal(size=(k - 1, 3))
    free *= (rng.uniform(0.3, 1.0, size=(k - 1, 1)) / np.linalg.norm(free, axis=1, keepdims=True))
    step = 0.02
    for it in range(iterations):
        pts = np.vstack([np.zeros((1, 3)), free])
        diff = free[:, None, :] - pts[None, :, :]  # (k-1) x k x 3
        d2 = np.sum(diff * diff, axis=2)
        own = np.arange(k - 1)
        d2[own, own + 1] = np.inf
        force = np.sum(diff / d2[:, :, None] ** 1.5, axis=1)
        force -= 1.0 * free  # mild pull toward the centre keeps points off the boundary pile-up
        norm = np.linalg.norm(force, axis=1, keepdims=True)
        free = free + step * (1.0 - it / iterations) * force / np.maximum(norm, 1e-12)
        radius = np.linalg.norm(free, axis=1, keepdims=True)
        free = np.where(radius > 1.0, free / radius, free)
    free *= extent / np.max(np.linalg.norm(free, axis=1))
    return KernelDisposition(np.vstack([np.zeros((1, 3)), free]), sigma)


# ---------------------------------------------------------------------------
# convolution


def kernel_influence(
    queries: np.ndarray,
    supports: np.ndarray,
    neighbors: NeighborIndex,
    disp: KernelDisposition,
    radius: float,
) -> sp.csr_matrix:
    """Sparse (Q*K) x M matrix of linear kernel correlations.

    Row ``q*K + k`` holds ``max(0, 1 - |y - x_k| / sigma)`` for every
    neighbour ``j`` of query ``q``, where ``y = (p_j - q) / radius``.
    """
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    supports = np.asarray(supports, dtype=np.float64).reshape(-1, 3)
    nq, m, kk = len(queries), len(supports), disp.size
    if neighbors.indices.shape[0] != nq or neighbors.num_supports != m:
        raise nx.ShapeError(
            f"neighbour index covers {neighbors.indices.shape[0]} queries / {neighbors.num_supports} supports, "
            f"got {nq} / {m}"
        )
    qi, slot = np.nonzero(np.arange(neighbors.indices.shape[1])[None, :] < neighbors.counts[:, None])
    sj = neighbors.indices[qi, slot]
    y = (supports[sj] - queries[qi]) / radius  # P x 3
    dist = np.linalg.norm(y[:, None, :] - disp.points[None, :, :], axis=2)  # P x K
    h = np.maximum(0.0, 1.0 - dist / disp.sigma)
    p_idx, k_idx = np.nonzero(h > 0)
    rows = qi[p_idx] * kk + k_idx
    mat = sp.csr_matrix((h[p_idx, k_idx], (rows, sj[p_idx])), shape=(nq * kk, m))
    mat.sum_duplicates()
    return mat


def kpconv(influence: sp.csr_matrix, feats: Tensor, weights: Tensor) -> Tensor:
    """Apply a kernel-point convolution given precomputed influences."""
    kk, cin, cout = weights.shape
    if feats.shape[1] != cin:
        raise nx.ShapeError(f"kpconv: features {feats.shape} vs weights {weights.shape}")
    nq = influence.shape[0] // kk
    gathered = nx.sparse_matmul(influence, feats)  # (Q*K) x Cin
    flat = nx.reshape(gathered, (nq, kk * cin))
    return nx.matmul(flat, nx.reshape(weights, (kk * cin, cout)))


def kpconv_forward(
    queries: np.ndarray,
    supports: np.ndarray,
    feats: Tensor,
    neighbors: NeighborIndex,
    weights: Tensor,
    disp: KernelDisposition,
    radius: float,
) -> Tensor:
    if weights.shape[0] != disp.size:
        raise nx.ShapeError(f"kpconv: {weights.shape[0]} weight slices for {disp.size} kernel points")
    if feats.shape[0] != len(supports):
        raise nx.ShapeError(f"kpconv: {feats.shape[0]} feature rows for {len(supports)} supports")
    return kpconv(kernel_influence(queries, supports, neighbors, disp, radius), feats, weights)


def upsample_nearest(coarse_feats: Tensor, fine_positions: np.ndarray, coarse_positions: np.ndarray) -> Tensor:
    if len(coarse_positions) == 0:
        raise ValueError("upsample_nearest: empty coarse cloud")
    return nx.gather_rows(coarse_feats, nearest_index(fine_positions, coarse_positions))


def input_features(cloud: PointCloud, black_indicator: bool = False) -> Tensor:
    """RGB plus a fourth channel: constant one, or one only for pure-black points."""
    if black_indicator:
        extra = np.all(cloud.colors == 0.0, axis=1).astype(np.float64)
    else:
        extra = np.ones(len(cloud))
    return Tensor(np.column_stack([cloud.colors, extra]))


# ---------------------------------------------------------------------------
# layer plans and precomputed geometry


@dataclass(frozen=True)
class LayerPlan:
    kind: str  # "classifier" or "segmenter"
    cell: float = 0.2
    widths: tuple[int, ...] = (64, 128, 256)
    num_classes: int = 4
    kernel_points: int = 15
    sigma: float = 0.3
    radius_factor: float = 2.5
    neighbor_cap: int = 40
    kernel_seed: int = 0
    black_indicator: bool = False
    deformable: bool = False
    attention_reduction: int = 4

    def __post_init__(self):
        if self.kind not in ("classifier", "segmenter"):
            raise ValueError(f"unknown network kind {self.kind!r}")
        if self.deformable:
            raise NotImplementedError("deformable kernels are not implemented; use rigid kernels")
        expected = 3 if self.kind == "classifier" else 5
        if len(self.widths) != expected:
            raise ValueError(f"{self.kind} needs {expected} widths, got {len(self.widths)}")
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))

    @property
    def levels(self) -> int:
        return len(self.widths)

    def level_cell(self, level: int) -> float:
        return self.cell * 2**level

    def level_radius(self, level: int) -> float:
        return self.radius_factor * self.level_cell(level)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> LayerPlan:
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        return cls(**d)

    def digest(self) -> bytes:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).digest()


@dataclass
class Pyramid:
    """Multi-resolution geometry for one subcloud, or a stacked batch of them."""

    positions: list[np.ndarray]  # per level
    conv: list[sp.csr_matrix]  # same-level influence, per level
    strided: list[sp.csr_matrix]  # level l -> l+1 influence
    pool: list[np.ndarray]  # level l+1 row -> padded member rows at level l
    upsample: list[np.ndarray]  # level l row -> nearest row at level l+1
    lengths: list[list[int]] = field(default_factory=list)  # per level, per subcloud

    @property
    def batch_size(self) -> int:
        return len(self.lengths[0])


def build_pyramid(positions: np.ndarray, plan: LayerPlan, disp: KernelDisposition) -> Pyramid:
    pts = [np.asarray(positions, dtype=np.float64).reshape(-1, 3)]
    pools = []
    for level in range(1, plan.levels):
        sub = grid_subsample(PointCloud(pts[-1], np.zeros_like(pts[-1])), plan.level_cell(level))
        pts.append(sub.cloud.positions)
        pools.append(sub.pooling_matrix())
    conv, strided, ups = [], [], []
    for level in range(plan.levels):
        r = plan.level_radius(level)
        nb = radius_neighbors(pts[level], pts[level], r, plan.neighbor_cap)
        conv.append(kernel_influence(pts[level], pts[level], nb, disp, r))
        if level + 1 < plan.levels:
            nb = radius_neighbors(pts[level + 1], pts[level], r, plan.neighbor_cap)
            strided.append(kernel_influence(pts[level + 1], pts[level], nb, disp, r))
            ups.append(nearest_index(pts[level], pts[level + 1]))
    return Pyramid(pts, conv, strided, pools, ups, [[len(p)] for p in pts])


def stack_pyramids(items: list[Pyramid]) -> Pyramid:
    if len(items) == 1:
        return items[0]
    levels = len(items[0].positions)
    positions = [np.vstack([it.positions[l] for it in items]) for l in range(levels)]
    conv = [sp.block_diag([it.conv[l] for it in items], format="csr") for l in range(levels)]
    strided = [sp.block_diag([it.strided[l] for it in items], format="csr") for l in range(levels - 1)]
    pool, ups = [], []
    for l in range(levels - 1):
        fine_total = sum(len(it.positions[l]) for it in items)
        width = max(it.pool[l].shape[1] for it in items)
        blocks = []
        fine_off = 0
        up_blocks = []
        coarse_off = 0
        for it in items:
            n_fine = len(it.positions[l])
            p = it.pool[l]
            shifted = np.where(p == n_fine, fine_total, p + fine_off)
            pad = np.full((p.shape[0], width - p.shape[1]), fine_total, dtype=np.intp)
            blocks.append(np.hstack([shifted, pad]))
            up_blocks.append(it.upsample[l] + coarse_off)
            fine_off += n_fine
            coarse_off += len(it.positions[l + 1])
        pool.append(np.vstack(blocks))
        ups.append(np.concatenate(up_blocks))
    lengths = [[n for it in items for n in it.lengths[l]] for l in range(levels)]
    return Pyramid(positions, conv, strided, pool, ups, lengths)


# ---------------------------------------------------------------------------
# layers


class KPConvLayer(Module):
    def __init__(self, cin: int, cout: int, kernel_points: int, rng: np.random.Generator):
        self.weight = Tensor(nx.kaiming_uniform(rng, (kernel_points, cin, cout), kernel_points * cin), requires_grad=True)

    def __call__(self, influence: sp.csr_matrix, x: Tensor) -> Tensor:
        return kpconv(influence, x, self.weight)


class SimpleBlock(Module):
    """KPConv + bias + leaky ReLU."""

    def __init__(self, cin: int, cout: int, plan: LayerPlan, rng: np.random.Generator):
        self.conv = KPConvLayer(cin, cout, plan.kernel_points, rng)
        self.bias = Tensor(np.zeros(cout), requires_grad=True)

    def __call__(self, influence: sp.csr_matrix, x: Tensor) -> Tensor:
        return nx.leaky_relu(nx.bias_add(self.conv(influence, x), self.bias))


class BottleneckBlock(Module):
    """1x1 reduce -> KPConv -> 1x1 expand, plus a residual path.

    The strided variant evaluates the convolution at the coarser level and
    max-pools the residual over each coarse point's voxel members. The
    residual is projected with a 1x1 layer when widths differ.
    """

    def __init__(self, cin: int, cout: int, plan: LayerPlan, rng: np.random.Generator, strided: bool = False):
        mid = max(cout // 4, 1)
        self.strided = strided
        self.reduce = Linear(cin, mid, rng)
        self.conv = KPConvLayer(mid, mid, plan.kernel_points, rng)
        self.conv_bias = Tensor(np.zeros(mid), requires_grad=True)
        self.expand = Linear(mid, cout, rng)
        self.shortcut = Linear(cin, cout, rng) if cin != cout else None

    def __call__(self, influence: sp.csr_matrix, x: Tensor, pool: np.ndarray | None = None) -> Tensor:
        if self.strided and pool is None:
            raise ValueError("strided block needs the pooling map of the coarser level")
        h = nx.leaky_relu(self.reduce(x))
        h = nx.leaky_relu(nx.bias_add(kpconv(influence, h, self.conv.weight), self.conv_bias))
        h = self.expand(h)
        res = nx.pool_max(x, pool) if self.strided else x
        if self.shortcut is not None:
            res = self.shortcut(res)
        return nx.add(h, res)


class ClassificationBackbone(Module):
    """One simple convolution and five bottlenecks; the second and fourth are strided."""

    def __init__(self, plan: LayerPlan, rng: np.random.Generator):
        if plan.kind != "classifier":
            raise ValueError("ClassificationBackbone needs a classifier plan")
        w0, w1, w2 = plan.widths
        self.stem = SimpleBlock(4, w0, plan, rng)
        self.blocks = [
            BottleneckBlock(w0, w0, plan, rng),
            BottleneckBlock(w0, w1, plan, rng, strided=True),
            BottleneckBlock(w1, w1, plan, rng),
            BottleneckBlock(w1, w2, plan, rng, strided=True),
            BottleneckBlock(w2, w2, plan, rng),
        ]

    def __call__(self, geo: Pyramid, feats: Tensor) -> Tensor:
        x = self.stem(geo.conv[0], feats)
        x = self.blocks[0](geo.conv[0], x)
        x = self.blocks[1](geo.strided[0], x, geo.pool[0])
        x = self.blocks[2](geo.conv[1], x)
        x = self.blocks[3](geo.strided[1], x, geo.pool[1])
        return self.blocks[4](geo.conv[2], x)


class SegmentationNet(Module):
    """U-Net of four encoder stages (two bottlenecks + strided bottleneck each)
    and a nearest-upsampling decoder with skip concatenation."""

    def __init__(self, plan: LayerPlan, rng: np.random.Generator):
        if plan.kind != "segmenter":
            raise ValueError("SegmentationNet needs a segmenter plan")
        self.plan = plan
        w = plan.widths
        self.stem = SimpleBlock(4, w[0], plan, rng)
        self.encoder = []
        for level in range(4):
            self.encoder.append(
                [
                    BottleneckBlock(w[level], w[level], plan, rng),
                    BottleneckBlock(w[level], w[level], plan, rng),
                    BottleneckBlock(w[level], w[level + 1], plan, rng, strided=True),
                ]
            )
        self.decoder = [Linear(w[level + 1] + w[level], w[level], rng) for level in range(4)]
        self.head = Linear(w[0], w[0], rng)
        self.classifier = Linear(w[0], plan.num_classes, rng, init="classifier")

    def named_parameters(self, prefix: str = ""):
        for key in ("stem",):
            yield from getattr(self, key).named_parameters(f"{prefix}{key}.")
        for level, stage in enumerate(self.encoder):
            for k, block in enumerate(stage):
                yield from block.named_parameters(f"{prefix}encoder.{level}.{k}.")
        for level, layer in enumerate(self.decoder):
            yield from layer.named_parameters(f"{prefix}decoder.{level}.")
        yield from self.head.named_parameters(f"{prefix}head.")
        yield from self.classifier.named_parameters(f"{prefix}classifier.")

    def __call__(self, geo: Pyramid, feats: Tensor) -> Tensor:
        x = self.stem(geo.conv[0], feats)
        skips = []
        for level, (b1, b2, down) in enumerate(self.encoder):
            x = b1(geo.conv[level], x)
            x = b2(geo.conv[level], x)
            skips.append(x)
            x = down(geo.strided[level], x, geo.pool[level])
        for level in reversed(range(4)):
            up = nx.gather_rows(x, geo.upsample[level])
            x = nx.leaky_relu(self.decoder[level](nx.concat([up, skips[level]], axis=1)))
        x = nx.leaky_relu(self.head(x))
        return self.classifier(x)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, plan: LayerPlan, params: dict[str, np.ndarray], extra: dict | None = None) -> None:
    """Binary checkpoint: magic, plan digest, plan JSON, then named float64 arrays."""
    header = json.dumps({"plan": plan.to_dict(), "extra": extra or {}}, sort_keys=True).encode()
    out = [CHECKPOINT_MAGIC, plan.digest(), struct.pack("<I", len(header)), header, struct.pack("<I", len(params))]
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        raw = name.encode()
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(arr.tobytes())
    Path(path).write_bytes(b"".join(out))


def load_checkpoint(path, expected: LayerPlan | None = None) -> tuple[LayerPlan, dict[str, np.ndarray], dict]:
    blob = Path(path).read_bytes()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a weakpoint checkpoint")
    digest = blob[8:40]
    pos = 40
    (hlen,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    header = json.loads(blob[pos : pos + hlen])
    pos += hlen
    plan = LayerPlan.from_dict(header["plan"])
    if plan.digest() != digest:
        raise CheckpointError(f"{path}: layer-plan digest mismatch (corrupt header)")
    if expected is not None and expected.digest() != digest:
        raise CheckpointError(f"{path}: checkpoint was trained with a different layer plan")
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos : pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
        pos += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    return plan, params, header.get("extra", {})


def state_dict(module: Module) -> dict[str, np.ndarray]:
    return {name: p.data.copy() for name, p in module.named_parameters()}


def load_state(module: Module, params: dict[str, np.ndarray]) -> None:
    own = dict(module.named_parameters())
    missing = sorted(set(own) - set(params))
    unexpected = sorted(set(params) - set(own))
    if missing or unexpected:
        raise CheckpointError(f"parameter mismatch: missing {missing[:3]}, unexpected {unexpected[:3]}")
    for name, p in own.items():
        if p.shape != params[name].shape:
            raise CheckpointError(f"{name}: shape {params[name].shape} != {p.shape}")
        p.data[...] = params[name]
