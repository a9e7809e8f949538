"""Run configuration: built-in defaults < config file < command-line flags."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple

from .deform_sampling import DEFAULT_ETA_SCHEDULE, SamplingConfig
from .losses import FocalParams
from .scale_target import TARGET_MODES, ScaleTargetParams
from .synthgen import PerturbSpec, SceneSpec

DEFAULT_CONFIG_NAME = "default_config.json"
OUT_DIR_ENV = "SMALLDET_OUT"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    beta: float = 0.73
    theta: float = 6.0
    alpha: float = 0.5
    gamma: float = 1.5
    eta: Tuple[float, ...] = DEFAULT_ETA_SCHEDULE
    num_heads: int = 2
    num_levels: int = 2
    num_points: int = 4
    hidden_dim: int = 8
    target_mode: str = "c_times_s"
    strict_min: bool = False
    share_branch_convs: bool = False
    seed: int = 42
    scheme: str = "visdrone"
    image_size: Tuple[int, int] = (512, 512)
    num_objects: int = 8
    num_categories: int = 3
    outside_fraction: float = 0.25
    num_negatives: int = 4
    center_jitter: float = 0.1
    scale_jitter: float = 0.1
    score_noise: float = 0.05
    num_scenes: int = 4
    steps: int = 500
    learning_rate: float = 0.05
    out_dir: Optional[str] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "eta", tuple(float(e) for e in self.eta))
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        problems = []
        for name, build in (("beta/theta", self.scale_target), ("alpha/gamma", self.focal),
                            ("eta/num_heads/num_levels/num_points", self.sampling)):
            try:
                build()
            except ValueError as exc:
                problems.append(f"{name}: {exc}")
        if self.target_mode not in TARGET_MODES:
            problems.append(f"target_mode: must be one of {TARGET_MODES}, got {self.target_mode!r}")
        if self.hidden_dim < 1 or self.hidden_dim % self.num_heads:
            problems.append(f"hidden_dim: must be a positive multiple of num_heads, got {self.hidden_dim}")
        if self.hidden_dim > 16:
            problems.append(f"hidden_dim: desk-scale runs allow at most 16, got {self.hidden_dim}")
        if not 0.0 <= self.outside_fraction <= 1.0:
            problems.append(f"outside_fraction: must lie in [0, 1], got {self.outside_fraction}")
        if not 1 <= self.num_scenes <= 64:
            problems.append(f"num_scenes: must lie in [1, 64], got {self.num_scenes}")
        if self.steps < 0 or self.learning_rate < 0:
            problems.append("steps and learning_rate: must be non-negative")
        for name in ("num_objects", "num_negatives", "center_jitter", "scale_jitter", "score_noise"):
            if getattr(self, name) < 0:
                problems.append(f"{name}: must be non-negative, got {getattr(self, name)}")
        if self.scheme not in ("visdrone", "soda_d", "soda-d"):
            problems.append(f"scheme: must be visdrone or soda-d, got {self.scheme!r}")
        if problems:
            raise ConfigError("invalid configuration:\n  " + "\n  ".join(problems))

    def scale_target(self) -> ScaleTargetParams:
        return ScaleTargetParams(self.beta, self.theta)

    def focal(self) -> FocalParams:
        return FocalParams(self.alpha, self.gamma)

    def sampling(self) -> SamplingConfig:
        return SamplingConfig(self.num_heads, self.num_levels, self.num_points, self.eta)

    def scene_spec(self, seed: Optional[int] = None) -> SceneSpec:
        mix = {"S": 0.6, "M": 0.3, "L": 0.1} if self.scheme == "visdrone" else {"ES": 0.3, "RS": 0.3, "GS": 0.2, "N": 0.2}
        return SceneSpec(self.image_size, self.num_objects, mix, self.scheme.replace("-", "_"),
                         self.num_categories, self.seed if seed is None else seed)

    def perturb_spec(self) -> PerturbSpec:
        return PerturbSpec(self.center_jitter, self.scale_jitter, self.score_noise)

    def to_dict(self) -> Dict[str, Any]:
        d = dataclasses.asdict(self)
        d["eta"] = list(self.eta)
        d["image_size"] = list(self.image_size)
        return d

    def to_json(self) -> str:
        d = self.to_dict()
        d.pop("out_dir")
        return json.dumps(d, indent=2) + "\n"

    def run_id(self, *extra: Any) -> str:
        payload = json.dumps([self.to_dict() | {"out_dir": None}, list(extra)], sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:12]

    def replace(self, **overrides: Any) -> "RunConfig":
        return dataclasses.replace(self, **{k: v for k, v in overrides.items() if v is not None})


def default_config_text() -> str:
    return resources.files("smalldet").joinpath(DEFAULT_CONFIG_NAME).read_text()


def from_mapping(data: Mapping[str, Any], base: RunConfig = RunConfig()) -> RunConfig:
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
    try:
        return dataclasses.replace(base, **dict(data))
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path=None, **overrides: Any) -> RunConfig:
    """Shipped defaults, then ``path`` (if any), then non-None overrides."""
    cfg = from_mapping(json.loads(default_config_text()))
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read configuration {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: configuration must be a JSON object")
        cfg = from_mapping(data, cfg)
    return cfg.replace(**overrides)
