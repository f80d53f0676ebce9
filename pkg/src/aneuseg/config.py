"""Pipeline configuration and its line-oriented ``key = value`` file format."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    """Every tunable of the segmentation pipeline, with working defaults.

    ``beta`` (geodesic fragment radius) defaults to ``1.5 * alpha`` and
    ``cell_size`` (seed grid pitch) defaults to ``alpha`` whenever they are
    not set explicitly; pass ``None`` to request the derived value.
    """

    alpha: float = 15.0            # max seed distance from a grid-cell center, mm
    beta: float | None = None      # geodesic fragment radius, mm
    cell_size: float | None = None  # seed grid cell edge, mm
    min_points: int = 500          # fragments smaller than this are dropped
    knn_k: int = 10                # neighbors per point in the surface graph
    cls_points: int = 1024         # points sampled per fragment for classification
    seg_points: int = 2048         # points sampled per segmentation pass
    cls_threshold: float = 0.23    # aneurysm-probability cutoff for fragment positivity
    vote_threshold: float = 0.5    # mean-probability cutoff inside a fragment
    min_passes: int = 3
    max_passes: int = 16
    pass_oversample: float = 2.0   # target expected per-point coverage
    crf_smooth_weight: float = 1.0
    crf_smooth_bandwidth: float = 1.5       # mm
    crf_bilateral_weight: float = 1.0
    crf_bilateral_pos_bandwidth: float = 3.0  # mm
    crf_bilateral_normal_bandwidth: float = 0.3
    crf_iterations: int = 10
    crf_parallel: bool = False     # parallel (not sequential) mean-field updates
    crf_per_pass: bool = True      # refine each pass; False refines the aggregate once
    augment_rotations: bool = False
    rng_seed: int = 0

    def __post_init__(self):
        if self.beta is None:
            self.beta = 1.5 * self.alpha
        if self.cell_size is None:
            self.cell_size = self.alpha
        self.validate()

    def validate(self) -> None:
        if not (self.alpha > 0 and np.isfinite(self.alpha)):
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        if not (self.beta > self.alpha):
            raise ConfigError(f"beta ({self.beta}) must exceed alpha ({self.alpha})")
        if not (self.cell_size > 0):
            raise ConfigError(f"cell_size must be positive, got {self.cell_size}")
        if not (0.0 < self.cls_threshold < 1.0):
            raise ConfigError(f"cls_threshold must lie in (0, 1), got {self.cls_threshold}")
        if not (0.0 < self.vote_threshold <= 1.0):
            raise ConfigError(f"vote_threshold must lie in (0, 1], got {self.vote_threshold}")
        if self.min_points < 1 or self.knn_k < 1:
            raise ConfigError("min_points and knn_k must be at least 1")
        if self.cls_points < 1 or self.seg_points < 1:
            raise ConfigError("cls_points and seg_points must be at least 1")
        if not (1 <= self.min_passes <= self.max_passes):
            raise ConfigError("need 1 <= min_passes <= max_passes")
        if self.pass_oversample <= 0:
            raise ConfigError("pass_oversample must be positive")
        for name in ("crf_smooth_weight", "crf_bilateral_weight"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        for name in ("crf_smooth_bandwidth", "crf_bilateral_pos_bandwidth", "crf_bilateral_normal_bandwidth"):
            if not (getattr(self, name) > 0):
                raise ConfigError(f"{name} must be positive")
        if self.crf_iterations < 1:
            raise ConfigError("crf_iterations must be at least 1")


_FIELD_TYPES = {f.name: f for f in fields(PipelineConfig)}
_BOOL_FIELDS = {"crf_parallel", "crf_per_pass", "augment_rotations"}
_INT_FIELDS = {
    "min_points", "knn_k", "cls_points", "seg_points",
    "min_passes", "max_passes", "crf_iterations", "rng_seed",
}


def _parse_value(key: str, raw: str):
    raw = raw.strip()
    if key in _BOOL_FIELDS:
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"cannot parse boolean for {key!r}: {raw!r}")
    try:
        if key in _INT_FIELDS:
            return int(raw)
        return float(raw)
    except ValueError as exc:
        raise ConfigError(f"cannot parse value for {key!r}: {raw!r}") from exc


def parse_config(text: str) -> PipelineConfig:
    """Parse ``key = value`` lines; blank lines and ``#`` comments allowed.

    Missing keys take their defaults; ``beta``/``cell_size`` are derived from
    ``alpha`` unless explicitly present.  Unknown keys are an error.
    """
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, raw)
    return PipelineConfig(**values)


def load_config(path) -> PipelineConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def save_config(config: PipelineConfig, path) -> None:
    lines = []
    for f in fields(PipelineConfig):
        v = getattr(config, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{f.name} = {v}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
