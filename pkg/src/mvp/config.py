"""Model configuration: stage schedules, profiles, and the JSON schema."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

SCHEMA_VERSION = 1
SCOPES = ("frame", "group", "global")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Scope:
    """Attention unit: one view, ``size`` consecutive views, or all views."""

    kind: str
    size: int | None = None

    def __post_init__(self):
        if self.kind not in SCOPES:
            raise ConfigError(f"unknown scope {self.kind!r}")
        if self.kind == "group" and (self.size is None or self.size < 1):
            raise ConfigError("group scope needs size >= 1")

    @classmethod
    def frame(cls):
        return cls("frame")

    @classmethod
    def group(cls, m: int):
        return cls("group", m)

    @classmethod
    def global_(cls):
        return cls("global")

    def group_size(self, n_views: int) -> int:
        if self.kind == "frame":
            return 1
        if self.kind == "global":
            return n_views
        return min(self.size, n_views)

    def __str__(self):
        return f"group({self.size})" if self.kind == "group" else self.kind


@dataclass(frozen=True)
class StageConfig:
    scope: str  # "frame" | "group" | "global"
    n_blocks: int
    dim: int
    patch: int  # pixel footprint of one token at this stage

    def resolve_scope(self, group_size: int) -> Scope:
        return Scope("group", group_size) if self.scope == "group" else Scope(self.scope)


@dataclass(frozen=True)
class ModelConfig:
    stages: tuple[StageConfig, StageConfig, StageConfig]
    group_size: int = 4
    height: int = 64
    width: int = 64
    head_dim: int = 16
    mlp_ratio: int = 4
    n_registers: int = 4
    pose_rope: str = "intra2d"
    use_pfa: bool = True
    pfa_dim: int | None = None  # None: width of the finest stage
    near: float = 0.1
    far: float = 10.0
    seed: int = 0
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(
            s if isinstance(s, StageConfig) else StageConfig(**s) for s in self.stages))
        self.validate()

    # ------------------------------------------------------------------
    def validate(self) -> None:
        if len(self.stages) != 3:
            raise ConfigError(f"exactly 3 stages required, got {len(self.stages)}")
        for s in self.stages:
            if s.scope not in SCOPES:
                raise ConfigError(f"unknown scope {s.scope!r}")
            if s.n_blocks < 0 or s.dim < 1 or s.patch < 1:
                raise ConfigError(f"invalid stage {s}")
            if s.dim % self.head_dim:
                raise ConfigError(f"stage dim {s.dim} not divisible by head_dim {self.head_dim}")
        for a, b in zip(self.stages, self.stages[1:]):
            if b.patch == 2 * a.patch:
                if b.dim != 2 * a.dim:
                    raise ConfigError("token reduction must double the embed width")
            elif 2 * b.patch == a.patch:
                if 2 * b.dim != a.dim:
                    raise ConfigError("token expansion must halve the embed width")
            elif b.patch == a.patch:
                if b.dim != a.dim:
                    raise ConfigError("equal patch sizes need equal widths")
            else:
                raise ConfigError(f"patch sizes {a.patch}->{b.patch} are not related by x2")
        coarse = max(s.patch for s in self.stages)
        if self.height % coarse or self.width % coarse:
            raise ConfigError(f"resolution {self.height}x{self.width} must be divisible by {coarse}")
        if self.group_size < 1:
            raise ConfigError("group_size must be >= 1")
        if self.pose_rope not in ("off", "intra2d"):
            raise ConfigError(f"pose_rope must be off|intra2d, got {self.pose_rope!r}")
        if self.head_dim % 4 and self.pose_rope == "intra2d":
            raise ConfigError("2-D rotary phases need head_dim divisible by 4")
        if not 0 < self.near < self.far:
            raise ConfigError("need 0 < near < far")

    # ------------------------------------------------------------------
    @property
    def patch(self) -> int:
        return self.stages[0].patch

    def grid(self, stage: int) -> tuple[int, int]:
        p = self.stages[stage].patch
        return self.height // p, self.width // p

    @property
    def finest_stage(self) -> int:
        return min(range(3), key=lambda i: (self.stages[i].patch, -i))

    @property
    def fused_dim(self) -> int:
        return self.pfa_dim or self.stages[self.finest_stage].dim

    def with_resolution(self, height: int, width: int) -> "ModelConfig":
        return replace(self, height=height, width=width)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = [asdict(s) for s in self.stages]
        d["schema"] = SCHEMA_VERSION
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        schema = d.pop("schema", SCHEMA_VERSION)
        if schema != SCHEMA_VERSION:
            raise ConfigError(f"unsupported config schema {schema}")
        d["stages"] = tuple(StageConfig(**s) for s in d["stages"])
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _pyramid(d1: int, p: int, blocks=(2, 4, 8)) -> tuple[StageConfig, ...]:
    return (StageConfig("frame", blocks[0], d1, p),
            StageConfig("group", blocks[1], 2 * d1, 2 * p),
            StageConfig("global", blocks[2], 4 * d1, 4 * p))


def desk_profile(**kw) -> ModelConfig:
    """Widths 32/64/128, blocks 2/4/8, patches 8/16/32, 64x64 input."""
    base = dict(stages=_pyramid(32, 8), height=64, width=64, head_dim=16, name="desk")
    base.update(kw)
    return ModelConfig(**base)


def full_profile(**kw) -> ModelConfig:
    """Published scale: widths 256/512/1024, head dim 64, 480x256 input."""
    base = dict(stages=_pyramid(256, 8), height=256, width=480, head_dim=64, name="full")
    base.update(kw)
    return ModelConfig(**base)


def micro_profile(**kw) -> ModelConfig:
    """Widths 8/16/32 on 16x16 images (patches 4/8/16), for gradient checks."""
    base = dict(stages=_pyramid(8, 4), height=16, width=16, head_dim=4, name="micro")
    base.update(kw)
    return ModelConfig(**base)


PROFILES = {"desk": desk_profile, "full": full_profile, "micro": micro_profile}


def load_config(spec: str) -> ModelConfig:
    """A profile name (desk/full/micro) or a path to a JSON config."""
    if spec in PROFILES and not Path(spec).exists():
        return PROFILES[spec]()
    return ModelConfig.from_dict(json.loads(Path(spec).read_text()))
