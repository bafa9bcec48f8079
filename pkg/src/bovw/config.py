"""Flat key=value pipeline configuration.

Every experiment parameter lives here so a run can be reproduced from a
single text file; unknown keys are rejected to catch typos.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ParameterError
from .freak import (DEFAULT_OUTER_RADIUS, DEFAULT_RING_RATIO, DEFAULT_SMOOTHING_RATIO,
                    RetinalPattern, build_pattern)
from .retrieval import RANKING_RULES, RULE_CLASS_FILTERED
from .scalespace import DetectorParams

CHANNEL_MODES = ("fused", "sift", "freak")


@dataclass
class PipelineConfig:
    """All tunables, flattened; see ``to_file`` for the on-disk names."""

    # detector
    octaves: int = 4
    scales_per_octave: int = 3
    base_sigma: float = 1.6
    contrast_threshold: float = 0.03
    edge_ratio: float = 10.0
    border: int = 8
    # retina pattern
    freak_outer_radius: float = DEFAULT_OUTER_RADIUS
    freak_ring_ratio: float = DEFAULT_RING_RATIO
    freak_smoothing_ratio: float = DEFAULT_SMOOTHING_RATIO
    # codebook training
    kmeans_max_iters: int = 100
    kmeans_tol: float = 1e-4
    kmeans_n_init: int = 3
    # classifier
    svm_c_reg: float = 1.0
    svm_epochs: int = 1000
    # retrieval
    ranking_rule: str = RULE_CLASS_FILTERED
    # evaluation protocol
    codebook_sizes: list[int] = field(default_factory=lambda: [50, 100, 200, 300, 400, 600, 800])
    feature_fractions: list[float] = field(default_factory=lambda: [0.25, 0.50, 0.75])
    runs: int = 10
    top_k: int = 20
    channel_modes: list[str] = field(default_factory=lambda: list(CHANNEL_MODES))
    eval_database: str = "test"  # "test" or "all"
    train_fraction: float = 0.7
    # global
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.ranking_rule not in RANKING_RULES:
            raise ParameterError(f"ranking_rule must be one of {RANKING_RULES}")
        for mode in self.channel_modes:
            if mode not in CHANNEL_MODES:
                raise ParameterError(f"channel mode must be one of {CHANNEL_MODES}")
        if self.eval_database not in ("test", "all"):
            raise ParameterError("eval_database must be 'test' or 'all'")
        if self.runs < 1 or self.top_k < 1:
            raise ParameterError("runs and top_k must be >= 1")

    def detector_params(self) -> DetectorParams:
        return DetectorParams(self.octaves, self.scales_per_octave, self.base_sigma,
                              self.contrast_threshold, self.edge_ratio, self.border)

    def pattern(self) -> RetinalPattern:
        return build_pattern(self.freak_outer_radius, self.freak_ring_ratio,
                             self.freak_smoothing_ratio)

    def to_file(self, path: str | Path) -> None:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, list):
                value = ",".join(str(v) for v in value)
            lines.append(f"{f.name} = {value}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def from_file(cls, path: str | Path) -> "PipelineConfig":
        text = Path(path).read_text(encoding="utf-8")
        overrides: dict[str, str] = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParameterError(f"{path}:{lineno}: expected key = value")
            key, value = (part.strip() for part in line.split("=", 1))
            overrides[key] = value
        return cls.from_overrides(overrides)

    @classmethod
    def from_overrides(cls, overrides: dict[str, str]) -> "PipelineConfig":
        known = {f.name: f for f in fields(cls)}
        defaults = cls()
        kwargs = {}
        for key, value in overrides.items():
            if key not in known:
                raise ParameterError(f"unknown config key {key!r}")
            kwargs[key] = _parse_value(key, value, getattr(defaults, key))
        return cls(**kwargs)


def _parse_value(key: str, text: str, default):
    try:
        if isinstance(default, bool):
            return text.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, list):
            items = [part.strip() for part in text.split(",") if part.strip()]
            if default and isinstance(default[0], int):
                return [int(v) for v in items]
            if default and isinstance(default[0], float):
                return [float(v) for v in items]
            return items
        return text
    except ValueError as exc:
        raise ParameterError(f"config key {key!r}: cannot parse {text!r}") from exc
