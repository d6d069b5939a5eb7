"""Flat ``key = value`` config files (no section headers needed)."""

import configparser
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple

from .gazefield import DEFAULT_ALPHA_S, DEFAULT_SIGMA, GazeParams
from .reward import RewardConfig

ENV_VAR = "GAZEKIT_CONFIG"
DEFAULT_GRID = (32, 32)


def read_flat_config(path) -> Dict[str, str]:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    text = Path(path).read_text(encoding="utf-8")
    parser.read_string("[gazekit]\n" + text, source=str(path))
    return dict(parser["gazekit"])


def parse_grid(spec: str) -> Tuple[int, int]:
    """Parse ``ROWSxCOLS`` into two positive ints."""
    try:
        rows, cols = (int(v) for v in spec.lower().split("x"))
    except ValueError:
        raise ValueError(f"grid must look like ROWSxCOLS, got {spec!r}") from None
    if rows < 1 or cols < 1:
        raise ValueError(f"grid dimensions must be positive, got {spec!r}")
    return rows, cols


@dataclass
class CliConfig:
    alpha_s: float = DEFAULT_ALPHA_S
    sigma: float = DEFAULT_SIGMA
    grid: Tuple[int, int] = DEFAULT_GRID
    reward: RewardConfig = field(default_factory=RewardConfig)
    fmt: Optional[str] = None

    @property
    def gaze(self) -> GazeParams:
        return GazeParams(self.alpha_s, self.sigma)


def load_config(path=None, env=None) -> CliConfig:
    """Build a CliConfig from ``path``, else $GAZEKIT_CONFIG, else defaults."""
    env = os.environ if env is None else env
    path = path or env.get(ENV_VAR)
    cfg = CliConfig()
    if not path:
        return cfg
    values = read_flat_config(path)
    if "alpha_s" in values:
        cfg.alpha_s = float(values["alpha_s"])
    if "sigma" in values:
        cfg.sigma = float(values["sigma"])
    if "grid" in values:
        cfg.grid = parse_grid(values["grid"])
    if "format" in values:
        cfg.fmt = values["format"]
    cfg.reward = RewardConfig.from_mapping(values)
    return cfg
