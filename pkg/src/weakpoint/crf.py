"""Fully connected CRF over points, solved by synchronous mean-field updates.

Pairwise kernel between points ``i`` and ``j``::

    k_ij = w1 * exp(-|p_i - p_j|^2 / 2 ta^2 - |c_i - c_j|^2 / 2 tb^2)
         + w2 * exp(-|p_i - p_j|^2 / 2 tg^2)

with Potts compatibility. Message passing is exact (dense, chunked rows),
which bounds the scene size; larger inputs must be refined per subcloud.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .cloudstore import PointCloud
from .mprm import PseudoLabel, ScoreMap

MASKED_PENALTY = 1e4
EXACT_BUDGET = 20_000


@dataclass(frozen=True)
class CrfConfig:
    w1: float = 10.0
    theta_alpha: float = 0.5
    theta_beta: float = 0.1
    w2: float = 3.0
    theta_gamma: float = 0.1
    iterations: int = 10
    chunk: int = 1024

    def __post_init__(self):
        if self.w1 < 0 or self.w2 < 0:
            raise ValueError("kernel weights must be non-negative")
        if min(self.theta_alpha, self.theta_beta, self.theta_gamma) <= 0:
            raise ValueError("bandwidths must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")

    @classmethod
    def from_mapping(cls, values: dict) -> CrfConfig:
        known = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, value in values.items():
            if key not in known:
                raise KeyError(f"unknown CRF setting {key!r}")
            kwargs[key] = int(value) if key in ("iterations", "chunk") else float(value)
        return cls(**kwargs)


def unary_potentials(scores: ScoreMap) -> np.ndarray:
    """Negative log-softmax over allowed classes; disallowed classes get a large finite cost."""
    if not np.all(np.isfinite(scores.scores)):
        raise FloatingPointError("NaN in unary scores")
    if not np.all(scores.positive.any(axis=1)):
        raise ValueError("a point has no positive class")
    z = np.where(scores.positive, scores.scores, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return np.where(scores.positive, -logp, MASKED_PENALTY)


def pairwise_kernel(positions: np.ndarray, colors: np.ndarray, config: CrfConfig, rows: slice | None = None) -> np.ndarray:
    """Dense kernel block ``k[rows, :]`` with a zero diagonal."""
    rows = rows or slice(0, len(positions))
    p, c = positions[rows], colors[rows]
    dp = np.sum((p[:, None, :] - positions[None, :, :]) ** 2, axis=2)
    dc = np.sum((c[:, None, :] - colors[None, :, :]) ** 2, axis=2)
    k = config.w1 * np.exp(-dp / (2 * config.theta_alpha**2) - dc / (2 * config.theta_beta**2))
    k += config.w2 * np.exp(-dp / (2 * config.theta_gamma**2))
    idx = np.arange(rows.start, rows.start + k.shape[0])
    k[idx - rows.start, idx] = 0.0
    return k


def normalize_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def mean_field(
    positions: np.ndarray, colors: np.ndarray, unary: np.ndarray, config: CrfConfig, history: list | None = None
) -> np.ndarray:
    """Run ``config.iterations`` synchronous updates; returns the marginals Q (N x L).

    Under Potts compatibility the penalty for label ``l`` at point ``i`` is
    ``sum_j k_ij (1 - Q_j(l))``.
    """
    n = len(positions)
    if n > EXACT_BUDGET:
        raise ValueError(f"{n} points exceed the exact mean-field budget of {EXACT_BUDGET}")
    q = normalize_rows(-unary)
    if history is not None:
        history.append(q.copy())
    if config.iterations == 0 or (config.w1 == 0 and config.w2 == 0):
        return q
    blocks = [slice(s, min(s + config.chunk, n)) for s in range(0, n, config.chunk)]
    kernels = [pairwise_kernel(positions, colors, config, b) for b in blocks] if n <= 4096 else None
    for _ in range(config.iterations):
        message = np.empty_like(q)
        for k, b in enumerate(blocks):
            kern = kernels[k] if kernels is not None else pairwise_kernel(positions, colors, config, b)
            message[b] = kern @ (1.0 - q)
        q = normalize_rows(-unary - message)
        if history is not None:
            history.append(q.copy())
    return q


def crf_refine(cloud: PointCloud, unary_scores: ScoreMap, config: CrfConfig | None = None) -> PseudoLabel:
    config = config or CrfConfig()
    if unary_scores.shape[0] != len(cloud):
        raise ValueError(f"{unary_scores.shape[0]} score rows for {len(cloud)} points")
    unary = unary_potentials(unary_scores)
    q = mean_field(cloud.positions, cloud.colors, unary, config)
    labels = np.argmax(q, axis=1)
    return PseudoLabel(labels.astype(np.int64), q[np.arange(len(labels)), labels])
