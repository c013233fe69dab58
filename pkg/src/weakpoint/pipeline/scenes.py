"""Synthetic indoor rooms: a floor, four walls and box-shaped furniture.

A recipe is a plain dict so it can be written to JSON next to the scene::

    {"density": 25.0, "noise": 0.005, "primitives": [
        {"kind": "floor", "class_id": 0, "min": [0, 0], "max": [5, 5], "color": [...]},
        {"kind": "wall", "class_id": 1, "start": [0, 0], "end": [5, 0], "height": 3.0, ...},
        {"kind": "box", "class_id": 2, "center": [1, 1], "size": [0.8, 0.6, 1.0], ...}]}

Density is points per square metre of surface.
"""

from __future__ import annotations

import numpy as np

from ..cloudstore import PointCloud

CLASS_NAMES = ("floor", "wall", "cabinet", "chair", "table", "bed", "sofa", "bookshelf")

# base colours per class (rgb in [0, 1]); furniture gets distinct hues
CLASS_COLORS = (
    (0.55, 0.45, 0.35),
    (0.85, 0.85, 0.80),
    (0.60, 0.30, 0.15),
    (0.20, 0.35, 0.70),
    (0.75, 0.60, 0.20),
    (0.70, 0.25, 0.40),
    (0.25, 0.60, 0.35),
    (0.45, 0.25, 0.55),
)

# (min, max) footprint and height per furniture class
FURNITURE_SIZES = {
    2: ((0.6, 1.2), (0.5, 0.8), (1.0, 1.8)),
    3: ((0.5, 0.7), (0.5, 0.7), (0.8, 1.1)),
    4: ((1.0, 1.6), (0.8, 1.2), (0.7, 0.8)),
    5: ((1.4, 2.0), (1.8, 2.2), (0.5, 0.7)),
    6: ((1.6, 2.2), (0.8, 1.0), (0.7, 0.9)),
    7: ((0.8, 1.2), (0.3, 0.4), (1.6, 2.0)),
}


def _sample_rect(rng, origin, u, v, count):
    a = rng.random((count, 1))
    b = rng.random((count, 1))
    return origin + a * u + b * v


def _surface_points(prim: dict, density: float, rng: np.random.Generator) -> np.ndarray:
    kind = prim["kind"]
    if kind == "floor":
        lo = np.array(prim["min"], dtype=float)
        hi = np.array(prim["max"], dtype=float)
        area = float(np.prod(hi - lo))
        n = int(round(area * density))
        xy = rng.uniform(lo, hi, size=(n, 2))
        return np.column_stack([xy, np.full(n, float(prim.get("z", 0.0)))])
    if kind == "wall":
        start = np.array(prim["start"] + [0.0], dtype=float)
        end = np.array(prim["end"] + [0.0], dtype=float)
        height = float(prim["height"])
        u = end - start
        v = np.array([0.0, 0.0, height])
        n = int(round(np.linalg.norm(u) * height * density))
        return _sample_rect(rng, start, u, v, n)
    if kind == "box":
        cx, cy = prim["center"]
        sx, sy, sz = prim["size"]
        x0, y0 = cx - sx / 2, cy - sy / 2
        faces = [
            (np.array([x0, y0, sz]), np.array([sx, 0, 0]), np.array([0, sy, 0])),  # top
            (np.array([x0, y0, 0]), np.array([sx, 0, 0]), np.array([0, 0, sz])),
            (np.array([x0, y0 + sy, 0]), np.array([sx, 0, 0]), np.array([0, 0, sz])),
            (np.array([x0, y0, 0]), np.array([0, sy, 0]), np.array([0, 0, sz])),
            (np.array([x0 + sx, y0, 0]), np.array([0, sy, 0]), np.array([0, 0, sz])),
        ]
        parts = []
        for origin, u, v in faces:
            n = int(round(np.linalg.norm(u) * np.linalg.norm(v) * density))
            parts.append(_sample_rect(rng, origin, u, v, n))
        return np.vstack(parts)
    raise ValueError(f"unknown primitive kind {kind!r}")


def _inside_box(points: np.ndarray, prim: dict) -> np.ndarray:
    cx, cy = prim["center"]
    sx, sy, _ = prim["size"]
    return (np.abs(points[:, 0] - cx) < sx / 2) & (np.abs(points[:, 1] - cy) < sy / 2)


def generate_scene(recipe: dict, seed: int) -> PointCloud:
    prims = recipe.get("primitives") or []
    if not prims:
        raise ValueError("scene recipe has no primitives")
    rng = np.random.default_rng(seed)
    density = float(recipe.get("density", 25.0))
    noise = float(recipe.get("noise", 0.0))
    color_noise = float(recipe.get("color_noise", 0.04))
    boxes = [p for p in prims if p["kind"] == "box"]
    pos, col, lab = [], [], []
    for prim in prims:
        pts = _surface_points(prim, density, rng)
        if prim["kind"] == "floor" and boxes:
            hidden = np.zeros(len(pts), dtype=bool)
            for box in boxes:
                hidden |= _inside_box(pts, box)
            pts = pts[~hidden]
        base = np.array(prim.get("color", CLASS_COLORS[prim["class_id"] % len(CLASS_COLORS)]))
        pos.append(pts)
        col.append(base + color_noise * rng.standard_normal((len(pts), 3)))
        lab.append(np.full(len(pts), int(prim["class_id"])))
    positions = np.vstack(pos)
    if noise > 0:
        positions = positions + noise * rng.standard_normal(positions.shape)
    return PointCloud(positions, np.clip(np.vstack(col), 0, 1), np.concatenate(lab))


def room_recipe(
    rng: np.random.Generator,
    num_classes: int = 4,
    size_range: tuple[float, float] = (4.0, 6.0),
    height: float = 3.0,
    density: float = 25.0,
    max_per_class: int = 2,
) -> dict:
    """Random room with floor (class 0), walls (class 1) and furniture from classes 2..num_classes-1."""
    if num_classes < 2:
        raise ValueError("a room needs at least floor and wall classes")
    lx, ly = rng.uniform(*size_range, size=2)
    prims = [
        {"kind": "floor", "class_id": 0, "min": [0.0, 0.0], "max": [float(lx), float(ly)]},
    ]
    corners = [(0.0, 0.0), (lx, 0.0), (lx, ly), (0.0, ly)]
    for k in range(4):
        a, b = corners[k], corners[(k + 1) % 4]
        prims.append(
            {"kind": "wall", "class_id": 1, "start": [float(a[0]), float(a[1])], "end": [float(b[0]), float(b[1])], "height": height}
        )
    furniture = list(range(2, num_classes))
    placed: list[tuple[float, float, float, float]] = []
    if furniture:
        present = [c for c in furniture if rng.random() < 0.7] or [int(rng.choice(furniture))]
        for cls in present:
            for _ in range(int(rng.integers(1, max_per_class + 1))):
                (ax, bx), (ay, by), (az, bz) = FURNITURE_SIZES[cls]
                size = [float(rng.uniform(ax, bx)), float(rng.uniform(ay, by)), float(rng.uniform(az, bz))]
                for _try in range(50):
                    cx = float(rng.uniform(0.3 + size[0] / 2, lx - 0.3 - size[0] / 2))
                    cy = float(rng.uniform(0.3 + size[1] / 2, ly - 0.3 - size[1] / 2))
                    clash = any(
                        abs(cx - px) < (size[0] + psx) / 2 + 0.2 and abs(cy - py) < (size[1] + psy) / 2 + 0.2
                        for px, py, psx, psy in placed
                    )
                    if not clash:
                        placed.append((cx, cy, size[0], size[1]))
                        prims.append({"kind": "box", "class_id": cls, "center": [cx, cy], "size": size})
                        break
    return {"density": density, "noise": 0.005, "color_noise": 0.04, "primitives": prims}


def generate_rooms(count: int, seed: int, num_classes: int = 4, **kwargs) -> list[tuple[str, PointCloud, dict]]:
    """``count`` reproducible rooms as (scene id, cloud, recipe)."""
    rng = np.random.default_rng(seed)
    out = []
    for k in range(count):
        recipe = room_recipe(rng, num_classes=num_classes, **kwargs)
        scene_seed = int(rng.integers(0, 2**31 - 1))
        out.append((f"scene_{k:04d}", generate_scene(recipe, scene_seed), recipe))
    return out
