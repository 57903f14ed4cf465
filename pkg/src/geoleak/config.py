"""Flat ``key = value`` run configuration shared by every CLI command."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import InvalidParameterError
from .evaluation import DEFAULT_P_GRID
from .geosn import TargetMode
from .neural import ModelConfig
from .synth import SynthConfig

SEED_ENV = "GEOLEAK_SEED"
CONFIG_NAME = "config.txt"


@dataclass
class RunConfig:
    # paths
    out_dir: str = "out"
    tweets: str = ""
    graph: str = ""
    checkpoint: str = ""
    tweet_format: str = "csv"
    # generator
    n_users: int = 200
    mean_degree: int = 10
    rewiring_prob: float = 0.1
    center_lat: float = 40.7128
    center_lon: float = -74.0060
    radius_km: float = 100.0
    tweets_per_user_per_slot_rate: float = 1.0
    fraction_stationary: float = 0.6
    co_location_prob: float = 0.5
    geotag_prob: float = 1.0
    community_size: int = 20
    community_spread_km: float = 2.0
    community_center_std_km: float = 15.0
    anchor_spread_km: float = 8.0
    # slots and examples
    t_start: int = 1262304000
    n_slots: int = 248
    slot_duration_s: int = 10800
    n_ts: int = 4
    target_mode: str = TargetMode.NEXT_SLOT.value
    p: float = 0.9
    seed: int = 1
    # sweep
    p_values: str = ",".join(f"{p:g}" for p in DEFAULT_P_GRID)
    seeds: str = "1,2,3"
    jobs: int = 1
    # model and optimizer
    n_cnn: int = 4
    w_cnn: int = 4
    n_g: str = "20,10,30"
    k: int = 3
    learning_rate: float = 1e-2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    max_epochs: int = 10
    patience: int = 20
    batch_size: int = 16
    chunk_size: int = 16
    # reporting
    high_km: float = 1.0
    poor_km: float = 7.0
    split_threshold_km: float = -1.0  # negative: use the run's mean error

    # -- derived views ---------------------------------------------------------

    def synth_config(self) -> SynthConfig:
        names = {f.name for f in fields(SynthConfig)}
        return SynthConfig(**{n: getattr(self, n) for n in names})

    def model_config(self, seed: int | None = None) -> ModelConfig:
        return ModelConfig(
            n_ts=self.n_ts, n_cnn=self.n_cnn, w_cnn=self.w_cnn, n_g=parse_ints(self.n_g), k=self.k,
            learning_rate=self.learning_rate, adam_beta1=self.adam_beta1, adam_beta2=self.adam_beta2,
            adam_eps=self.adam_eps, max_epochs=self.max_epochs, patience=self.patience,
            batch_size=self.batch_size, chunk_size=self.chunk_size,
            seed=self.seed if seed is None else seed)

    @property
    def mode(self) -> TargetMode:
        try:
            return TargetMode(self.target_mode)
        except ValueError:
            raise InvalidParameterError(f"unknown target_mode {self.target_mode!r}") from None

    @property
    def p_grid(self) -> list[float]:
        return [float(v) for v in self.p_values.split(",") if v.strip()]

    @property
    def seed_list(self) -> list[int]:
        return parse_ints(self.seeds)

    def pipeline(self) -> dict:
        """Settings that must agree between training and evaluation."""
        return {"p": self.p, "seed": self.seed, "n_ts": self.n_ts, "target_mode": self.target_mode,
                "t_start": self.t_start, "n_slots": self.n_slots, "slot_duration_s": self.slot_duration_s}

    def to_text(self) -> str:
        lines = [f"{f.name} = {_format(getattr(self, f.name))}" for f in fields(self)]
        return "\n".join(lines) + "\n"

    def write(self, directory) -> Path:
        path = Path(directory) / CONFIG_NAME
        path.write_text(self.to_text())
        return path


def parse_ints(text) -> tuple[int, ...]:
    if isinstance(text, (tuple, list)):
        return tuple(int(v) for v in text)
    try:
        return tuple(int(v) for v in str(text).split(",") if v.strip())
    except ValueError:
        raise InvalidParameterError(f"expected comma-separated integers, got {text!r}") from None


def _format(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(name: str, kind, raw: str):
    raw = raw.strip()
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except ValueError:
        raise InvalidParameterError(f"{name}: cannot parse {raw!r} as {kind.__name__}") from None
    return raw


_TYPES = {f.name: {"int": int, "float": float, "str": str}[f.type] for f in fields(RunConfig)}


def key_name(key: str) -> str:
    name = key.strip().replace("-", "_")
    if name not in _TYPES:
        raise InvalidParameterError(f"unknown config key {key.strip()!r}")
    return name


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise InvalidParameterError(f"config line {lineno}: expected key = value")
        key, raw = line.split("=", 1)
        name = key_name(key)
        values[name] = _coerce(name, _TYPES[name], raw)
    return values


def resolve(config_path=None, overrides: dict | None = None, environ=None) -> RunConfig:
    """Defaults, then the config file, then ``GEOLEAK_SEED``, then explicit overrides."""
    environ = os.environ if environ is None else environ
    values = {}
    if config_path:
        values.update(parse_config_text(Path(config_path).read_text()))
    if environ.get(SEED_ENV, "").strip():
        values["seed"] = _coerce("seed", int, environ[SEED_ENV])
    for key, raw in (overrides or {}).items():
        name = key_name(key)
        values[name] = raw if not isinstance(raw, str) else _coerce(name, _TYPES[name], raw)
    cfg = RunConfig(**values)
    return cfg


def replace(cfg: RunConfig, **kw) -> RunConfig:
    return dataclasses.replace(cfg, **kw)
