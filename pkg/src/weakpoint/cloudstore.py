"""Point clouds, file I/O, voxel-grid subsampling and radius-neighbour search."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

UNCLASSIFIED = -1


class CloudFormatError(ValueError):
    """A cloud file could not be parsed."""


@dataclass(frozen=True)
class PointCloud:
    positions: np.ndarray
    colors: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        pos = np.ascontiguousarray(self.positions, dtype=np.float64).reshape(-1, 3)
        col = np.clip(np.asarray(self.colors, dtype=np.float64).reshape(-1, 3), 0.0, 1.0)
        if col.shape[0] != pos.shape[0]:
            raise ValueError(f"{pos.shape[0]} positions but {col.shape[0]} colors")
        if not np.all(np.isfinite(pos)):
            raise ValueError("positions must be finite")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "colors", col)
        if self.labels is not None:
            lab = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if lab.shape[0] != pos.shape[0]:
                raise ValueError(f"{pos.shape[0]} positions but {lab.shape[0]} labels")
            if np.any(lab < UNCLASSIFIED):
                raise ValueError("labels must be -1 (unclassified) or a class id")
            object.__setattr__(self, "labels", lab)

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def feature_dim(self) -> int:
        return 4

    def subset(self, index) -> PointCloud:
        index = np.asarray(index, dtype=np.intp)
        labels = None if self.labels is None else self.labels[index]
        return PointCloud(self.positions[index], self.colors[index], labels)

    def with_labels(self, labels) -> PointCloud:
        return PointCloud(self.positions, self.colors, labels)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.positions.min(axis=0), self.positions.max(axis=0)


# ---------------------------------------------------------------------------
# file formats


def _format_for(path: Path, fmt: str | None) -> str:
    if fmt is None:
        suffix = path.suffix.lower()
        fmt = {".ply": "ply_ascii", ".tsv": "xyzrgbl_tsv", ".txt": "xyzrgbl_tsv"}.get(suffix)
        if fmt is None:
            raise ValueError(f"cannot infer cloud format from {path.name!r}; pass format explicitly")
    if fmt not in ("ply_ascii", "xyzrgbl_tsv"):
        raise ValueError(f"unknown cloud format {fmt!r}")
    return fmt


def load_cloud(path, fmt: str | None = None) -> PointCloud:
    path = Path(path)
    fmt = _format_for(path, fmt)
    text = path.read_text()
    if fmt == "ply_ascii":
        return _parse_ply(text, path.name)
    return _parse_tsv(text, path.name)


def _parse_tsv(text: str, source: str) -> PointCloud:
    rows = []
    with_label = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) not in (6, 7):
            raise CloudFormatError(f"{source}:{lineno}: expected 6 or 7 fields, got {len(parts)}")
        has = len(parts) == 7
        if with_label is None:
            with_label = has
        elif with_label != has:
            raise CloudFormatError(f"{source}:{lineno}: label column present on some lines only")
        try:
            xyz = [float(v) for v in parts[:3]]
            rgb = [float(v) for v in parts[3:6]]
            lab = [int(parts[6])] if has else []
        except ValueError as exc:
            raise CloudFormatError(f"{source}:{lineno}: {exc}") from None
        rows.append(xyz + rgb + lab)
    if not rows:
        raise CloudFormatError(f"{source}: no points")
    arr = np.array(rows, dtype=np.float64)
    labels = arr[:, 6].astype(np.int64) if with_label else None
    return PointCloud(arr[:, :3], arr[:, 3:6] / 255.0, labels)


def _parse_ply(text: str, source: str) -> PointCloud:
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise CloudFormatError(f"{source}:1: missing 'ply' magic")
    count = None
    props: list[str] = []
    in_vertex = False
    body_start = None
    for lineno, raw in enumerate(lines[1:], start=2):
        tokens = raw.split()
        if not tokens:
            continue
        key = tokens[0]
        if key == "format":
            if len(tokens) < 2 or tokens[1] != "ascii":
                raise CloudFormatError(f"{source}:{lineno}: only ASCII PLY is supported")
        elif key == "element":
            in_vertex = len(tokens) == 3 and tokens[1] == "vertex"
            if in_vertex:
                count = int(tokens[2])
        elif key == "property" and in_vertex:
            props.append(tokens[-1])
        elif key == "end_header":
            body_start = lineno
            break
    if count is None or body_start is None:
        raise CloudFormatError(f"{source}: incomplete PLY header")
    needed = ["x", "y", "z", "red", "green", "blue"]
    for name in needed:
        if name not in props:
            raise CloudFormatError(f"{source}: PLY vertex lacks property {name!r}")
    cols = [props.index(n) for n in needed]
    label_col = props.index("label") if "label" in props else None
    data = np.empty((count, len(props)))
    for k in range(count):
        lineno = body_start + 1 + k
        if lineno > len(lines):
            raise CloudFormatError(f"{source}:{lineno}: expected {count} vertices, file ended")
        parts = lines[lineno - 1].split()
        if len(parts) < len(props):
            raise CloudFormatError(f"{source}:{lineno}: expected {len(props)} values")
        try:
            data[k] = [float(v) for v in parts[: len(props)]]
        except ValueError as exc:
            raise CloudFormatError(f"{source}:{lineno}: {exc}") from None
    labels = data[:, label_col].astype(np.int64) if label_col is not None else None
    return PointCloud(data[:, cols[:3]], data[:, cols[3:]] / 255.0, labels)


def _rgb255(colors: np.ndarray) -> np.ndarray:
    return np.rint(colors * 255.0).astype(np.int64)


def save_cloud(cloud: PointCloud, path, fmt: str | None = None) -> None:
    """Write a cloud; positions use repr-exact float formatting."""
    path = Path(path)
    fmt = _format_for(path, fmt)
    rgb = _rgb255(cloud.colors)
    out = []
    if fmt == "ply_ascii":
        out += ["ply", "format ascii 1.0", f"element vertex {len(cloud)}"]
        out += [f"property double {a}" for a in "xyz"]
        out += [f"property uchar {c}" for c in ("red", "green", "blue")]
        if cloud.labels is not None:
            out.append("property int label")
        out.append("end_header")
    for k in range(len(cloud)):
        fields = [repr(float(v)) for v in cloud.positions[k]] + [str(int(v)) for v in rgb[k]]
        if cloud.labels is not None:
            fields.append(str(int(cloud.labels[k])))
        out.append((" " if fmt == "ply_ascii" else "\t").join(fields))
    path.write_text("\n".join(out) + "\n")


# ---------------------------------------------------------------------------
# grid subsampling


@dataclass(frozen=True)
class Subsampled:
    cloud: PointCloud
    pooling: list[np.ndarray]  # member indices (into the input) per output point

    def pooling_matrix(self) -> np.ndarray:
        """Pooling lists padded with ``len(input)`` to a rectangle."""
        n_in = sum(len(m) for m in self.pooling)
        width = max(len(m) for m in self.pooling)
        out = np.full((len(self.pooling), width), n_in, dtype=np.intp)
        for k, members in enumerate(self.pooling):
            out[k, : len(members)] = members
        return out


def majority_label(labels: np.ndarray) -> int:
    """Most common non-negative label, smallest id on ties; -1 if none."""
    valid = labels[labels >= 0]
    if valid.size == 0:
        return UNCLASSIFIED
    counts = np.bincount(valid)
    return int(np.argmax(counts))


def grid_subsample(cloud: PointCloud, cell: float) -> Subsampled:
    """One barycentre per occupied voxel of side ``cell``; voxels anchored at the cloud minimum."""
    if cell <= 0:
        raise ValueError("cell size must be positive")
    pos = cloud.positions
    keys = np.floor((pos - pos.min(axis=0)) / cell).astype(np.int64)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    m = uniq.shape[0]
    counts = np.bincount(inverse, minlength=m).astype(np.float64)
    new_pos = np.zeros((m, 3))
    new_col = np.zeros((m, 3))
    np.add.at(new_pos, inverse, pos)
    np.add.at(new_col, inverse, cloud.colors)
    new_pos /= counts[:, None]
    new_col /= counts[:, None]
    order = np.argsort(inverse, kind="stable")
    splits = np.cumsum(counts.astype(np.intp))[:-1]
    pooling = np.split(order, splits)
    labels = None
    if cloud.labels is not None:
        labels = np.array([majority_label(cloud.labels[members]) for members in pooling], dtype=np.int64)
    return Subsampled(PointCloud(new_pos, new_col, labels), pooling)


# ---------------------------------------------------------------------------
# radius neighbours


@dataclass(frozen=True)
class NeighborIndex:
    """Per-query neighbour lists, padded with ``num_supports`` (the shadow index)."""

    indices: np.ndarray  # Q x H
    counts: np.ndarray  # Q
    radius: float
    max_neighbors: int
    num_supports: int

    def lists(self) -> list[np.ndarray]:
        return [self.indices[q, : self.counts[q]] for q in range(self.indices.shape[0])]

    def offset(self, shift: int, shadow: int) -> NeighborIndex:
        """Shift real indices by ``shift`` and remap padding to ``shadow`` (batch stacking)."""
        idx = np.where(self.indices == self.num_supports, shadow, self.indices + shift)
        return NeighborIndex(idx, self.counts, self.radius, self.max_neighbors, shadow)


class KDTree:
    """Median-split KD-tree. Queries are exact; the tree only prunes work."""

    def __init__(self, points: np.ndarray, leaf_size: int = 16):
        self.points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
        self.leaf_size = leaf_size
        # node arrays: lo, hi bounds; start/stop into self.order; children (-1 for leaves)
        self._lo: list[np.ndarray] = []
        self._hi: list[np.ndarray] = []
        self._range: list[tuple[int, int]] = []
        self._children: list[tuple[int, int]] = []
        self.order = np.arange(len(self.points))
        if len(self.points):
            self._build(0, len(self.points))

    def _build(self, start: int, stop: int) -> int:
        node = len(self._range)
        idx = self.order[start:stop]
        pts = self.points[idx]
        self._lo.append(pts.min(axis=0))
        self._hi.append(pts.max(axis=0))
        self._range.append((start, stop))
        self._children.append((-1, -1))
        if stop - start > self.leaf_size:
            axis = int(np.argmax(self._hi[node] - self._lo[node]))
            mid = (stop - start) // 2
            part = np.argpartition(pts[:, axis], mid, kind="introselect")
            self.order[start:stop] = idx[part]
            left = self._build(start, start + mid)
            right = self._build(start + mid, stop)
            self._children[node] = (left, right)
        return node

    def query_radius(self, queries: np.ndarray, radius: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """All (query, support, squared distance) triples with distance strictly below ``radius``."""
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        r2 = radius * radius
        qs, ss, ds = [], [], []
        if len(self.points) == 0 or len(queries) == 0:
            empty = np.zeros(0, dtype=np.intp)
            return empty, empty, np.zeros(0)
        stack = [(0, np.arange(len(queries)))]
        while stack:
            node, active = stack.pop()
            q = queries[active]
            gap = np.maximum(np.maximum(self._lo[node] - q, q - self._hi[node]), 0.0)
            gap2 = np.sum(gap * gap, axis=1)
            active = active[gap2 < r2]
            if active.size == 0:
                continue
            left, right = self._children[node]
            if left >= 0:
                stack.append((right, active))
                stack.append((left, active))
                continue
            start, stop = self._range[node]
            members = self.order[start:stop]
            diff = queries[active][:, None, :] - self.points[members][None, :, :]
            d2 = np.sum(diff * diff, axis=2)
            qi, si = np.nonzero(d2 < r2)
            qs.append(active[qi])
            ss.append(members[si])
            ds.append(d2[qi, si])
        if not qs:
            empty = np.zeros(0, dtype=np.intp)
            return empty, empty, np.zeros(0)
        return np.concatenate(qs), np.concatenate(ss), np.concatenate(ds)


def neighbors_from_pairs(
    num_queries: int, num_supports: int, q: np.ndarray, s: np.ndarray, d2: np.ndarray, radius: float, cap: int
) -> NeighborIndex:
    """Sort candidate pairs by (query, distance, support) and truncate to ``cap`` per query."""
    order = np.lexsort((s, d2, q))
    q, s = q[order], s[order]
    counts_all = np.bincount(q, minlength=num_queries)
    starts = np.concatenate([[0], np.cumsum(counts_all)[:-1]])
    rank = np.arange(q.size) - starts[q]
    keep = rank < cap
    counts = np.minimum(counts_all, cap)
    width = max(int(counts.max()) if num_queries else 0, 1)
    indices = np.full((num_queries, width), num_supports, dtype=np.intp)
    indices[q[keep], rank[keep]] = s[keep]
    return NeighborIndex(indices, counts.astype(np.intp), float(radius), int(cap), int(num_supports))


def radius_neighbors(
    queries: np.ndarray, supports: np.ndarray, radius: float, cap: int = 40, tree: KDTree | None = None
) -> NeighborIndex:
    """Supports strictly within ``radius`` of each query, nearest first, at most ``cap`` each."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    supports = np.asarray(supports, dtype=np.float64).reshape(-1, 3)
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    tree = tree or KDTree(supports)
    q, s, d2 = tree.query_radius(queries, radius)
    return neighbors_from_pairs(len(queries), len(supports), q, s, d2, radius, cap)


def brute_force_neighbors(queries: np.ndarray, supports: np.ndarray, radius: float, cap: int = 40) -> NeighborIndex:
    """O(N*M) reference used by tests and as a fallback for tiny inputs."""
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    supports = np.asarray(supports, dtype=np.float64).reshape(-1, 3)
    diff = queries[:, None, :] - supports[None, :, :]
    d2 = np.sum(diff * diff, axis=2)
    q, s = np.nonzero(d2 < radius * radius)
    return neighbors_from_pairs(len(queries), len(supports), q, s, d2[q, s], radius, cap)


def nearest_index(fine: np.ndarray, coarse: np.ndarray) -> np.ndarray:
    """Index of the nearest coarse point for every fine point; ties go to the lowest index."""
    coarse = np.asarray(coarse, dtype=np.float64).reshape(-1, 3)
    fine = np.asarray(fine, dtype=np.float64).reshape(-1, 3)
    if len(coarse) == 0:
        raise ValueError("nearest_index: empty coarse cloud")
    tree = KDTree(coarse)
    out = np.empty(len(fine), dtype=np.intp)
    best = np.full(len(fine), np.inf)
    # expanding search: start from a radius that catches most points, grow for the rest
    extent = float(np.max(np.ptp(coarse, axis=0))) if len(coarse) > 1 else 1.0
    radius = max(extent / max(len(coarse) ** (1 / 3), 1.0), 1e-6)
    pending = np.arange(len(fine))
    while pending.size:
        q, s, d2 = tree.query_radius(fine[pending], radius)
        if q.size:
            order = np.lexsort((s, d2, q))
            q, s, d2 = q[order], s[order], d2[order]
            first = np.concatenate([[True], q[1:] != q[:-1]])
            found = pending[q[first]]
            out[found] = s[first]
            best[found] = d2[first]
        pending = pending[~np.isfinite(best[pending])]
        radius *= 2.0
    return out
