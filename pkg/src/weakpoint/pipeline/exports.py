"""On-disk formats produced by the pipeline."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import numpy as np

from ..cloudstore import PointCloud, load_cloud, save_cloud
from ..mprm import ScoreMap
from .scenes import CLASS_NAMES


def class_names(num_classes: int) -> list[str]:
    return [CLASS_NAMES[k] if k < len(CLASS_NAMES) else f"class_{k}" for k in range(num_classes)]


def write_json(path, payload) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def scene_files(directory) -> list[Path]:
    """Scene clouds in a directory (TSV or PLY), sorted by name; sidecars excluded."""
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"{d}: not a directory")
    files = sorted(p for p in d.iterdir() if p.suffix in (".tsv", ".ply") and not p.name.endswith(".scores.tsv"))
    if not files:
        raise FileNotFoundError(f"{d}: no .tsv or .ply scenes")
    return files


def load_scenes(directory) -> list[tuple[str, PointCloud]]:
    return [(p.stem, load_cloud(p)) for p in scene_files(directory)]


def write_pseudo_labels(out_dir, scene_id: str, cloud: PointCloud, labels: np.ndarray, scores: ScoreMap | None, num_classes: int) -> Path:
    """``<id>.tsv`` with the pseudo class as label, ``<id>.counts.json``, and optionally ``<id>.scores.tsv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{scene_id}.tsv"
    save_cloud(cloud.with_labels(labels), path)
    counts = np.bincount(labels, minlength=num_classes)
    write_json(out_dir / f"{scene_id}.counts.json", {"scene_id": scene_id, "counts": dict(zip(class_names(num_classes), map(int, counts)))})
    if scores is not None:
        write_scores(out_dir / f"{scene_id}.scores.tsv", scores)
    return path


def write_scores(path, scores: ScoreMap) -> None:
    lines = ["# per-point class scores; nan marks classes outside the weak label"]
    for row, pos in zip(scores.scores, scores.positive):
        lines.append("\t".join(repr(float(v)) if ok else "nan" for v, ok in zip(row, pos)))
    Path(path).write_text("\n".join(lines) + "\n")


def read_scores(path) -> ScoreMap:
    rows = []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#") or not line.strip():
            continue
        rows.append([float(v) for v in line.split()])
    arr = np.array(rows, dtype=np.float64)
    positive = np.isfinite(arr)
    return ScoreMap(np.where(positive, arr, 0.0), positive, "fused", "scene")


def scores_from_labels(labels: np.ndarray, num_classes: int, confidence: float = 0.7) -> ScoreMap:
    """Log-probability scores for hard labels; classes never used in the file are masked."""
    other = (1.0 - confidence) / max(num_classes - 1, 1)
    scores = np.full((len(labels), num_classes), np.log(other))
    scores[np.arange(len(labels)), labels] = np.log(confidence)
    present = np.zeros(num_classes, dtype=bool)
    present[np.unique(labels[labels >= 0])] = True
    return ScoreMap(scores, np.broadcast_to(present, scores.shape), "labels", "scene")


def write_weak_labels(path, records: Sequence[dict]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
