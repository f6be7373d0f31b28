"""Pipeline configuration: a flat ``key = value`` text format with typed validation.

Blank lines and ``#`` comments are ignored. Tuples are comma separated
(``stage_depths = 2, 2, 12, 2``). Unknown keys are an error.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from typing import Any, Dict, Tuple

from cvheat.graphs import GraphConfig
from cvheat.heat import GRAPH_MODES, K_MODES, BackboneConfig
from cvheat.detection import LossWeights

ENCODINGS = ("frame", "voxel")
RESOLUTIONS = (128, 256, 448, 512, 640)


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    seed: int = 0
    resolution: int = 640
    encoding: str = "frame"
    voxel_bins: int = 3
    slice_interval: int = 10_000
    # graph construction
    patch_size: int = 8
    dist_threshold: float = 20.0
    node_threshold: int = 5
    knn_k: int = 4
    graph_mode: str = "all"
    gcn_width: int = 64
    gcn_depth: int = 2
    # backbone
    stage_depths: Tuple[int, ...] = (2, 2, 12, 2)
    stage_widths: Tuple[int, ...] = (64, 128, 256, 512)
    fe_dim: int = 16
    k_mode: str = "fe"
    fixed_k: float = 3.0
    k2_groups: int = 4
    # detection
    num_classes: int = 3
    num_queries: int = 100
    cost_cls: float = 2.0
    cost_l1: float = 5.0
    cost_iou: float = 2.0
    vfl_alpha: float = 0.75
    vfl_gamma: float = 2.0
    # optimisation
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 8
    steps: int = 2000
    eval_every: int = 500
    hflip: bool = True
    # synthetic data
    train_scenes: int = 512
    val_scenes: int = 128
    max_objects: int = 3
    noise_rate: float = 0.3
    contour_density: float = 1.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        def check(cond, msg):
            if not cond:
                raise ConfigError(msg)

        check(self.encoding in ENCODINGS, f"encoding must be one of {ENCODINGS}")
        check(self.graph_mode in GRAPH_MODES, f"graph_mode must be one of {GRAPH_MODES}")
        check(self.k_mode in K_MODES, f"k_mode must be one of {K_MODES}")
        check(self.resolution % 32 == 0 and self.resolution > 0, "resolution must be a positive multiple of 32")
        check(self.resolution % self.patch_size == 0, "resolution must be divisible by patch_size")
        check(len(self.stage_depths) == 4 and all(d >= 1 for d in self.stage_depths), "stage_depths needs 4 entries >= 1")
        check(len(self.stage_widths) == 4 and all(w >= 2 for w in self.stage_widths), "stage_widths needs 4 entries")
        check(all(w % self.k2_groups == 0 for w in self.stage_widths), "k2_groups must divide every stage width")
        check(self.slice_interval > 0, "slice_interval must be positive")
        check(self.voxel_bins >= 1, "voxel_bins must be >= 1")
        check(self.dist_threshold > 0, "dist_threshold must be positive")
        check(self.node_threshold >= 1 and self.knn_k >= 1, "node_threshold and knn_k must be >= 1")
        check(self.fixed_k >= 0, "fixed_k must be non-negative")
        check(self.num_queries >= 1 and self.num_classes >= 1, "num_queries and num_classes must be >= 1")
        check(self.batch_size >= 1 and self.steps >= 0, "batch_size must be >= 1 and steps >= 0")

    # derived configs

    @property
    def in_chans(self) -> int:
        return 2 if self.encoding == "frame" else 2 * self.voxel_bins

    def graph_config(self) -> GraphConfig:
        return GraphConfig(self.patch_size, self.patch_size, self.dist_threshold, self.node_threshold, self.knn_k)

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(
            stage_depths=tuple(self.stage_depths),
            stage_widths=tuple(self.stage_widths),
            in_chans=self.in_chans,
            img_size=(self.resolution, self.resolution),
            fe_dim=self.fe_dim,
            k_mode=self.k_mode,
            fixed_k=self.fixed_k,
            k2_groups=self.k2_groups,
            graph_mode=self.graph_mode,
            gcn_width=self.gcn_width,
            gcn_depth=self.gcn_depth,
            patch_size=self.patch_size,
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.cost_cls, self.cost_l1, self.cost_iou, self.vfl_alpha, self.vfl_gamma)

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)


_FIELDS = {f.name: f for f in fields(PipelineConfig)}


def _field_kind(name: str):
    return type(getattr(PipelineConfig(), name))


def coerce(name: str, raw: Any) -> Any:
    """Convert a raw string (or value) to the declared type of ``name``."""
    if name not in _FIELDS:
        raise ConfigError(f"unknown config key {name!r}")
    kind = _field_kind(name)
    if not isinstance(raw, str):
        return tuple(int(v) for v in raw) if kind is tuple else kind(raw)
    text = raw.strip()
    try:
        if kind is bool:
            if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return text.lower() in ("true", "1", "yes")
        if kind is tuple:
            return tuple(int(v) for v in text.strip("()").split(",") if v.strip())
        if kind is int:
            return int(text.replace("_", ""))
        if kind is float:
            return float(text)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {text!r} as {kind.__name__}") from None
    return text


def parse_config(text: str, **overrides) -> PipelineConfig:
    values: Dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = coerce(key, raw)
    for key, raw in overrides.items():
        values[key] = coerce(key, raw)
    return PipelineConfig(**values)


def _format_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def serialize_config(cfg: PipelineConfig) -> str:
    return "".join(f"{f.name} = {_format_value(getattr(cfg, f.name))}\n" for f in fields(cfg))


def load_config(path) -> PipelineConfig:
    with open(path) as fh:
        return parse_config(fh.read())
