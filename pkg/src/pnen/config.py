"""Flat ``key=value`` run configuration.

The dataclass below is the single schema: the config parser, the CLI flags
and their help text are all generated from its fields.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .backbone import ModelConfig
from .errors import ConfigError
from .filters import FilterSpec


def _opt(default, help: str, choices=None):
    return field(default=default, metadata={"help": help, "choices": choices})


@dataclass
class RunConfig:
    # model
    c: int = _opt(3, "image channels (1 gray, 3 color)")
    d: int = _opt(64, "feature channels")
    m: int = _opt(64, "query/reference embedding dim")
    n: int = _opt(32, "value embedding dim")
    S: int = _opt(3, "pyramid scales; scale s uses kernel=stride=2**s")
    M: int = _opt(3, "number of DRB + non-local groups")
    scales: str = _opt("", "explicit comma list of pyramid exponents (overrides S)")
    nonlocal_kind: str = _opt("pnb", "non-local variant", ("none", "nlb", "apnb", "pnb"))
    pool_sizes: str = _opt("1,3,6,8", "APNB adaptive pooling grid sizes")
    dtype: str = _opt("f32", "training precision", ("f32", "f64"))
    # optimisation
    patch_size: int = _opt(96, "training patch edge")
    batch_size: int = _opt(8, "patches per step")
    lr_init: float = _opt(5e-4, "initial learning rate")
    lr_floor: float = _opt(1e-4, "learning rate lower bound")
    plateau_patience: int = _opt(5, "epochs without improvement before halving the lr")
    plateau_min_delta: float = _opt(1e-6, "relative improvement that counts as progress")
    beta1: float = _opt(0.9, "Adam beta1")
    beta2: float = _opt(0.999, "Adam beta2")
    adam_eps: float = _opt(1e-8, "Adam epsilon")
    clip_grad: float = _opt(0.0, "global gradient-norm clip; 0 disables")
    epochs: int = _opt(10, "training epochs")
    steps_per_epoch: int = _opt(100, "optimizer steps per epoch")
    seed: int = _opt(0, "master seed")
    # target filter
    filter_kind: str = _opt("gaussian", "oracle smoothing filter", ("gaussian", "median", "weighted_median"))
    filter_radius: int = _opt(2, "median / weighted median radius")
    filter_sigma: float = _opt(1.5, "gaussian sigma")
    filter_sigma_spatial: float = _opt(2.0, "weighted median spatial sigma")
    filter_sigma_range: float = _opt(0.2, "weighted median range sigma")
    # data
    dataset: str = _opt("", "directory of PGM/PPM training images; empty uses synthetic textures")
    synth_count: int = _opt(16, "synthetic training images")
    synth_size: int = _opt(128, "synthetic image edge")
    synth_amplitude: float = _opt(0.02, "synthetic texture amplitude")
    checkpoint_every: int = _opt(0, "epochs between intermediate checkpoints; 0 keeps only the final one")

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for f in dataclasses.fields(self):
            choices = f.metadata.get("choices")
            if choices and getattr(self, f.name) not in choices:
                raise ConfigError(f"{f.name}={getattr(self, f.name)!r} not in {choices}")
        if self.lr_floor > self.lr_init:
            raise ConfigError("lr_floor must not exceed lr_init")
        if self.batch_size < 1 or self.epochs < 0 or self.steps_per_epoch < 1:
            raise ConfigError("batch_size and steps_per_epoch must be positive, epochs non-negative")
        if self.nonlocal_kind == "pnb" and self.patch_size < 2 * 2 ** max(self.scale_list):
            raise ConfigError(f"patch_size {self.patch_size} gives fewer than 2 references at stride {2 ** max(self.scale_list)}")
        self.filter_spec()

    @property
    def scale_list(self) -> tuple[int, ...]:
        if self.scales.strip():
            return tuple(int(s) for s in self.scales.split(","))
        return tuple(range(1, self.S + 1))

    def model_config(self, dtype: str | None = None) -> ModelConfig:
        return ModelConfig(
            c=self.c,
            d=self.d,
            m=self.m,
            n=self.n,
            S=len(self.scale_list),
            M=self.M,
            nonlocal_kind=self.nonlocal_kind,
            scales=self.scale_list,
            pool_sizes=tuple(int(p) for p in self.pool_sizes.split(",")),
            dtype=dtype or self.dtype,
            seed=self.seed,
        )

    def filter_spec(self) -> FilterSpec:
        return FilterSpec(
            kind=self.filter_kind,
            radius=self.filter_radius,
            sigma=self.filter_sigma,
            sigma_spatial=self.filter_sigma_spatial,
            sigma_range=self.filter_sigma_range,
        )

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def dumps(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in dataclasses.fields(self))


SCHEMA = {f.name: f for f in dataclasses.fields(RunConfig)}


def coerce(key: str, raw: str) -> Any:
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    typ = SCHEMA[key].type
    try:
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ}") from exc
    return raw


def parse_config(text: str, source: str = "<config>") -> dict[str, Any]:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key = key.strip()
        values[key] = coerce(key, raw.strip())
    return values


def load_config(path=None, **overrides) -> RunConfig:
    values = {}
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        values.update(parse_config(p.read_text(), str(p)))
    values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**values)
