"""Flat ``key = value`` configuration files.

Lines are ``key = value``; ``#`` starts a comment. Values are coerced to the
type of the matching :class:`Config` field (comma-separated for tuples).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from ..crf import CrfConfig
from ..kpnet import LayerPlan

DEFAULT_CONFIG_PATH = Path(__file__).with_name("default.conf")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Config:
    # data
    num_classes: int = 4
    cell: float = 0.2
    subcloud_radius: float = 2.0
    label_level: str = "subcloud"
    # networks
    cls_widths: tuple[int, ...] = (64, 128, 256)
    seg_widths: tuple[int, ...] = (32, 64, 96, 128, 160)
    kernel_points: int = 15
    kernel_sigma: float = 0.3
    radius_factor: float = 2.5
    neighbor_cap: int = 40
    kernel_seed: int = 0
    attention_reduction: int = 4
    dropout: float = 0.5
    black_indicator: bool = False
    train_paths: tuple[str, ...] = ("plain", "spatial", "channel", "pointwise")
    # optimisation
    learning_rate: float = 0.01
    momentum: float = 0.98
    lr_decay_epochs: float = 100.0
    batch_limit: int = 6000
    grad_clip: float = 1.0
    cls_epochs: int = 100
    seg_epochs: int = 50
    seed: int = 0
    # pseudo labels
    paths: tuple[str, ...] = ("plain", "spatial", "channel", "pointwise")
    fusion: str = "max"
    crf: bool = True
    # crf
    crf_w1: float = 10.0
    crf_theta_alpha: float = 0.5
    crf_theta_beta: float = 0.1
    crf_w2: float = 3.0
    crf_theta_gamma: float = 0.1
    crf_iterations: int = 10

    def __post_init__(self):
        if self.label_level not in ("scene", "subcloud"):
            raise ConfigError(f"label_level must be scene or subcloud, got {self.label_level!r}")
        if self.fusion not in ("max", "sum"):
            raise ConfigError(f"fusion must be max or sum, got {self.fusion!r}")
        if self.batch_limit <= 0:
            raise ConfigError("batch_limit must be positive")

    def classifier_plan(self) -> LayerPlan:
        return LayerPlan(
            "classifier",
            cell=self.cell,
            widths=self.cls_widths,
            num_classes=self.num_classes,
            kernel_points=self.kernel_points,
            sigma=self.kernel_sigma,
            radius_factor=self.radius_factor,
            neighbor_cap=self.neighbor_cap,
            kernel_seed=self.kernel_seed,
            black_indicator=self.black_indicator,
            attention_reduction=self.attention_reduction,
        )

    def segmenter_plan(self) -> LayerPlan:
        return dataclasses.replace(self.classifier_plan(), kind="segmenter", widths=self.seg_widths)

    def crf_config(self) -> CrfConfig:
        return CrfConfig(
            w1=self.crf_w1,
            theta_alpha=self.crf_theta_alpha,
            theta_beta=self.crf_theta_beta,
            w2=self.crf_w2,
            theta_gamma=self.crf_theta_gamma,
            iterations=self.crf_iterations,
        )

    def replace(self, **changes) -> Config:
        return dataclasses.replace(self, **changes)


def _coerce(name: str, kind, raw: str):
    text = raw.strip()
    try:
        if kind is bool or kind == "bool":
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if kind is int or kind == "int":
            return int(text)
        if kind is float or kind == "float":
            return float(text)
        if kind == "tuple[int, ...]":
            return tuple(int(v) for v in text.split(",") if v.strip())
        if kind == "tuple[str, ...]":
            return tuple(v.strip() for v in text.split(",") if v.strip())
        return text
    except ValueError:
        raise ConfigError(f"{name}: cannot read {raw!r} as {kind}") from None


def parse_key_values(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def config_from_mapping(values: dict[str, str], base: Config | None = None) -> Config:
    types = {f.name: f.type for f in fields(Config)}
    changes = {}
    for key, raw in values.items():
        if key not in types:
            raise ConfigError(f"unknown setting {key!r}")
        changes[key] = _coerce(key, types[key], raw)
    return dataclasses.replace(base or Config(), **changes)


def load_config(path=None, overrides: dict[str, str] | None = None) -> Config:
    values = {}
    if path is not None:
        p = Path(path)
        values.update(parse_key_values(p.read_text(), p.name))
    values.update(overrides or {})
    return config_from_mapping(values)


def dump_config(config: Config) -> str:
    lines = []
    for f in fields(Config):
        v = getattr(config, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
