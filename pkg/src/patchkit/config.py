"""Flat key = value run configuration and deterministic seed derivation."""

import hashlib
import math
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import DataError


def derive_seed(seed, label):
    """Deterministic 64-bit child seed for a named stage.

    SHA-256 over "<seed>:<label>" keeps derived streams independent of
    platform hash randomization and of each other.
    """
    digest = hashlib.sha256(f"{seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def item_seed(seed, stage, index):
    """Per-item child seed, independent of worker layout."""
    return derive_seed(seed, f"{stage}[{index}]")


@dataclass
class RunConfig:
    """Resolved pipeline configuration; every key has a default."""

    data_root: str = ""
    split: str = ""
    patch_size: float = 9.6
    enlarge_margin: float = 0.2
    crop_noise_radius: float = 3.0
    anchor_l: float = 3.9
    anchor_w: float = 1.6
    anchor_h: float = 1.56
    anchor_z: float = -1.0
    n_total: int = 512
    surface_window: int = 64
    prob_easy: float = 1.0
    prob_moderate: float = 0.8
    prob_hard: float = 0.6
    scale_min: float = 0.95
    scale_max: float = 1.05
    mirror_prob: float = 0.5
    rotation_range: float = math.pi / 2.0
    nms_threshold: float = 0.01
    score_threshold: float = 0.05
    removal_score_threshold: float = -1.0  # negative disables the gate
    eval_iou: float = 0.7
    metric: str = "3d"
    interp: str = "r11"
    seed: int = 0
    workers: int = 1

    @classmethod
    def from_file(cls, path):
        """Parse a flat key = value file; unknown keys are errors."""
        config = cls()
        known = {f.name: f.type for f in fields(cls)}
        for line_no, line in enumerate(Path(path).read_text().splitlines(), start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise DataError(f"{path}: line {line_no}: expected key = value")
            key, _, value = stripped.partition("=")
            key = key.strip()
            value = value.strip()
            if key not in known:
                raise DataError(f"{path}: line {line_no}: unknown config key {key!r}")
            current = getattr(config, key)
            try:
                if isinstance(current, bool):
                    parsed = value.lower() in ("1", "true", "yes")
                elif isinstance(current, int):
                    parsed = int(value)
                elif isinstance(current, float):
                    parsed = float(value)
                else:
                    parsed = value
            except ValueError as exc:
                raise DataError(f"{path}: line {line_no}: bad value for {key}: {value!r}") from exc
            setattr(config, key, parsed)
        return config

    def resolved_lines(self):
        """The fully resolved configuration as loggable key = value lines."""
        return [f"{f.name} = {getattr(self, f.name)}" for f in fields(self)]

    @property
    def difficulty_probs(self):
        return {"easy": self.prob_easy, "moderate": self.prob_moderate, "hard": self.prob_hard}
