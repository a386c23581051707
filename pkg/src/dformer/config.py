"""Model and run configuration, plus the flat ``key = value`` config file format.

Spatial triples are written ``DxHxW`` (depth first) everywhere; lists are
comma separated.  Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .attention import GridDims, UnitDims
from .errors import ConfigurationError

NUM_STAGES = 4
INIT_SCHEMES = ("fixed", "fan_in")


def _triple(value) -> tuple[int, int, int]:
    if isinstance(value, str):
        parts = value.lower().replace(" ", "").split("x")
    else:
        parts = list(value)
    if len(parts) != 3:
        raise ConfigurationError(f"expected DxHxW triple, got {value!r}")
    try:
        return tuple(int(p) for p in parts)
    except ValueError as exc:
        raise ConfigurationError(f"expected integers in {value!r}") from exc


def format_triple(t) -> str:
    return "x".join(str(int(v)) for v in t)


@dataclass(frozen=True)
class ModelConfig:
    """Every architectural hyperparameter.

    Defaults are the full-scale configuration.  Channels, heads and unit sizes
    follow common windowed-transformer practice.
    """

    input_dims: tuple[int, int, int] = (64, 128, 128)
    in_channels: int = 1
    num_classes: int = 9
    channels: int = 96
    patch: tuple[int, int, int] = (2, 4, 4)
    depths: tuple[int, ...] = (1, 1, 3, 1)
    heads: tuple[int, ...] = (3, 6, 12, 24)
    units: tuple[tuple[int, int, int], ...] = ((4, 4, 4),) * NUM_STAGES
    mlp_ratio: int = 4
    dpe_kernel: tuple[int, int, int] = (3, 3, 3)
    head_channels: int | None = None
    ln_eps: float = 1e-5
    init: str = "fixed"

    def __post_init__(self):
        object.__setattr__(self, "input_dims", _triple(self.input_dims))
        object.__setattr__(self, "patch", _triple(self.patch))
        object.__setattr__(self, "dpe_kernel", _triple(self.dpe_kernel))
        object.__setattr__(self, "depths", tuple(int(v) for v in self.depths))
        object.__setattr__(self, "heads", tuple(int(v) for v in self.heads))
        object.__setattr__(self, "units", tuple(_triple(u) for u in self.units))

    @property
    def decoder_channels(self) -> int:
        return self.head_channels if self.head_channels is not None else self.channels

    def stage_channels(self, stage: int) -> int:
        return self.channels * 2 ** stage

    def stage_grid(self, stage: int, input_dims=None) -> GridDims:
        dims = self.input_dims if input_dims is None else _triple(input_dims)
        return GridDims(*(n // p // 2 ** stage for n, p in zip(dims, self.patch)))

    def stage_unit(self, stage: int) -> UnitDims:
        return UnitDims(*self.units[stage])

    def validate(self, input_dims=None) -> "ModelConfig":
        dims = self.input_dims if input_dims is None else _triple(input_dims)
        if len(self.depths) != NUM_STAGES or len(self.heads) != NUM_STAGES \
                or len(self.units) != NUM_STAGES:
            raise ConfigurationError(f"depths, heads and units need {NUM_STAGES} entries each")
        for name in ("in_channels", "num_classes", "channels", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.head_channels is not None and self.head_channels < 1:
            raise ConfigurationError("head_channels must be positive")
        if self.init not in INIT_SCHEMES:
            raise ConfigurationError(f"init must be one of {INIT_SCHEMES}, got {self.init!r}")
        if self.ln_eps <= 0:
            raise ConfigurationError("ln_eps must be positive")
        if any(k % 2 == 0 or k < 1 for k in self.dpe_kernel):
            raise ConfigurationError(f"dpe_kernel extents must be odd, got {self.dpe_kernel}")
        if any(d < 1 for d in self.depths):
            raise ConfigurationError("every stage needs at least one LSM/GSM pair")
        for axis, n, p in zip(("depth", "height", "width"), dims, self.patch):
            if p < 1 or n < 1 or n % (p * 2 ** (NUM_STAGES - 1)):
                raise ConfigurationError(
                    f"input {axis} {n} is not divisible by patch {p} x {2 ** (NUM_STAGES - 1)}")
        for s in range(NUM_STAGES):
            c, heads = self.stage_channels(s), self.heads[s]
            if heads < 1 or c % heads:
                raise ConfigurationError(f"stage {s + 1}: {heads} heads do not divide {c} channels")
            grid, unit = self.stage_grid(s, dims), self.stage_unit(s)
            for axis, n, u in zip(("depth", "height", "width"), grid, unit):
                if u < 1 or n % u:
                    raise ConfigurationError(
                        f"stage {s + 1}: {axis} grid {n} is not divisible by unit {u}")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    seed: int = 0
    lr: float = 0.01
    momentum: float = 0.99
    weight_decay: float = 3e-5
    poly_power: float = 0.9
    steps: int = 1000
    batch_size: int = 2
    eval_batch_size: int = 1
    data_count: int = 16
    data_kind: str = "spheres"
    data_noise: float = 0.1
    val_fraction: float = 0.25
    eval_every: int = 100

    def validate(self) -> "RunConfig":
        if self.lr <= 0:
            raise ConfigurationError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be non-negative")
        if self.steps < 1:
            raise ConfigurationError("steps must be at least 1")
        if self.batch_size < 1 or self.eval_batch_size != 1:
            raise ConfigurationError("batch_size must be >= 1 and eval_batch_size must be 1")
        if not 0 < self.val_fraction < 1:
            raise ConfigurationError("val_fraction must lie in (0, 1)")
        if self.eval_every < 1:
            raise ConfigurationError("eval_every must be at least 1")
        self.model.validate()
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        d["model"] = ModelConfig.from_dict(d.get("model", {}))
        return cls(**d)


def _int_list(v: str) -> tuple[int, ...]:
    return tuple(int(x) for x in v.split(","))


def _units(v: str) -> tuple[tuple[int, int, int], ...]:
    units = tuple(_triple(x) for x in v.split(","))
    return units * NUM_STAGES if len(units) == 1 else units


def _optional_int(v: str) -> int | None:
    return None if v.lower() in ("none", "") else int(v)


_MODEL_KEYS = {
    "input": ("input_dims", _triple),
    "in_channels": ("in_channels", int),
    "num_classes": ("num_classes", int),
    "channels": ("channels", int),
    "patch": ("patch", _triple),
    "depths": ("depths", _int_list),
    "heads": ("heads", _int_list),
    "units": ("units", _units),
    "mlp_ratio": ("mlp_ratio", int),
    "dpe_kernel": ("dpe_kernel", _triple),
    "head_channels": ("head_channels", _optional_int),
    "ln_eps": ("ln_eps", float),
    "init": ("init", str),
}

_RUN_KEYS = {
    "seed": int, "lr": float, "momentum": float, "weight_decay": float,
    "poly_power": float, "steps": int, "batch_size": int, "eval_batch_size": int,
    "data_count": int, "data_kind": str, "data_noise": float, "val_fraction": float,
    "eval_every": int,
}


def parse_config(text: str) -> RunConfig:
    """Parse ``key = value`` lines (``#`` starts a comment) into a validated RunConfig."""
    model_kw, run_kw = {}, {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            if key in _MODEL_KEYS:
                name, conv = _MODEL_KEYS[key]
                model_kw[name] = conv(value)
            elif key in _RUN_KEYS:
                run_kw[key] = _RUN_KEYS[key](value)
            else:
                raise ConfigurationError(f"line {lineno}: unknown key {key!r}")
        except ValueError as exc:
            if isinstance(exc, ConfigurationError):
                raise
            raise ConfigurationError(f"line {lineno}: bad value for {key!r}: {value!r}") from exc
    return RunConfig(model=ModelConfig(**model_kw), **run_kw).validate()


def load_config(path: str | Path) -> RunConfig:
    return parse_config(Path(path).read_text())


def format_config(run: RunConfig) -> str:
    m = run.model
    lines = [
        f"input = {format_triple(m.input_dims)}",
        f"in_channels = {m.in_channels}",
        f"num_classes = {m.num_classes}",
        f"channels = {m.channels}",
        f"patch = {format_triple(m.patch)}",
        f"depths = {','.join(map(str, m.depths))}",
        f"heads = {','.join(map(str, m.heads))}",
        f"units = {','.join(format_triple(u) for u in m.units)}",
        f"mlp_ratio = {m.mlp_ratio}",
        f"dpe_kernel = {format_triple(m.dpe_kernel)}",
        f"head_channels = {m.head_channels}",
        f"ln_eps = {m.ln_eps!r}",
        f"init = {m.init}",
    ]
    lines += [f"{k} = {getattr(run, k)!r}" if isinstance(getattr(run, k), float)
              else f"{k} = {getattr(run, k)}" for k in _RUN_KEYS]
    return "\n".join(lines) + "\n"
