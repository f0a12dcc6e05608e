"""Run configuration: defaults, ``key = value`` files and flag overrides.

Precedence is flag > file > default. Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields
from typing import Any, Mapping, Optional

from .errors import ConfigError
from .filters import FilterParams
from .neural import Hyperparams
from .timeseries import Segment, SplitSpec, SynthConfig

CHOICES = {
    "filter": ("enkf", "pf"),
    "score_source": ("predicted", "updated"),
    "metric": ("f1", "mcc"),
}


@dataclass(frozen=True)
class RunConfig:
    # neural
    tau: int = 12
    latent_dim: int = 3
    hidden_dim: int = 64
    epochs: int = 100
    lr: float = 1e-3
    batch_size: int = 64
    alpha1: float = 0.45
    alpha2: float = 0.45
    alpha3: float = 0.45
    validation_fraction: float = 0.25
    # filters
    filter: str = "pf"
    n_sigma: int = 20
    n_particles: int = 1000
    alpha_init: float = 100.0
    alpha_small: float = 1e-2
    sigma_rbf: float = 1.0
    nt_fraction: float = 0.1
    nrs_percent: float = 1.0
    score_source: str = "predicted"
    rejuvenate_every_step: bool = False
    # evaluation / misc
    metric: str = "f1"
    seed: int = 0
    label_column: str = "label"
    categorical: str = ""
    # synthetic data
    synth_latent_dim: int = 3
    synth_num_sensors: int = 8
    synth_length: int = 1000
    synth_noise_scale: float = 0.1
    synth_seed: int = 0
    synth_system_seed: int = -1
    synth_segments: str = ""
    explicit: frozenset = field(default=frozenset(), compare=False, repr=False)

    def __post_init__(self) -> None:
        positive_ints = ("tau", "latent_dim", "hidden_dim", "batch_size", "synth_latent_dim",
                         "synth_num_sensors", "synth_length")
        for k in positive_ints:
            if getattr(self, k) < 1:
                raise ConfigError(f"{k} must be a positive integer")
        for k in ("epochs", "seed", "synth_seed"):
            if getattr(self, k) < 0:
                raise ConfigError(f"{k} must be non-negative")
        if self.n_sigma < 2 or self.n_particles < 2:
            raise ConfigError("n_sigma and n_particles must be at least 2")
        for k in ("lr", "alpha_init", "alpha_small", "sigma_rbf", "synth_noise_scale"):
            if not getattr(self, k) > 0:
                raise ConfigError(f"{k} must be positive")
        for k in ("alpha1", "alpha2", "alpha3"):
            if getattr(self, k) < 0:
                raise ConfigError(f"{k} must be non-negative")
        if not 0 < self.validation_fraction < 1:
            raise ConfigError("validation_fraction must lie in (0, 1)")
        if not 0 <= self.nt_fraction <= 1:
            raise ConfigError("nt_fraction must lie in [0, 1]")
        if not 0 <= self.nrs_percent <= 100:
            raise ConfigError("nrs_percent must lie in [0, 100]")
        for k, allowed in CHOICES.items():
            if getattr(self, k) not in allowed:
                raise ConfigError(f"{k} must be one of {', '.join(allowed)}; got {getattr(self, k)!r}")

    # -- views for the library layers ------------------------------------------

    def hyperparams(self) -> Hyperparams:
        return Hyperparams(
            tau=self.tau, latent_dim=self.latent_dim, hidden_dim=self.hidden_dim,
            epochs=self.epochs, lr=self.lr, batch_size=self.batch_size,
            alpha1=self.alpha1, alpha2=self.alpha2, alpha3=self.alpha3,
        )

    def filter_params(self) -> FilterParams:
        return FilterParams(
            n_sigma=self.n_sigma, n_particles=self.n_particles, alpha_init=self.alpha_init,
            alpha_small=self.alpha_small, sigma_rbf=self.sigma_rbf, nt_fraction=self.nt_fraction,
            nrs_percent=self.nrs_percent, score_source=self.score_source,
            rejuvenate_every_step=self.rejuvenate_every_step,
        )

    def split_spec(self) -> SplitSpec:
        return SplitSpec(self.validation_fraction, self.tau)

    def categorical_columns(self) -> list[str]:
        return [c.strip() for c in self.categorical.split(",") if c.strip()]

    def synth_config(self) -> SynthConfig:
        return SynthConfig(
            latent_dim=self.synth_latent_dim,
            num_sensors=self.synth_num_sensors,
            length=self.synth_length,
            anomaly_segments=parse_segments(self.synth_segments),
            noise_scale=self.synth_noise_scale,
            seed=self.synth_seed,
            system_seed=None if self.synth_system_seed < 0 else self.synth_system_seed,
        )

    def as_dict(self) -> dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "explicit"}


KEYS = {f.name: f for f in fields(RunConfig) if f.name != "explicit"}


def key_name(raw: str) -> str:
    """Canonical key: ``synth.length`` and ``synth-length`` both map to ``synth_length``."""
    return raw.strip().replace(".", "_").replace("-", "_")


def parse_segments(text: str) -> tuple[Segment, ...]:
    """``"100:20:mean_shift; 300:10:spike"`` -> segments."""
    out = []
    for part in text.replace(",", ";").split(";"):
        part = part.strip()
        if not part:
            continue
        bits = part.split(":")
        if len(bits) != 3:
            raise ConfigError(f"segment {part!r} must look like start:length:kind")
        try:
            out.append(Segment(int(bits[0]), int(bits[1]), bits[2].strip()))
        except ValueError:
            raise ConfigError(f"segment {part!r}: start and length must be integers") from None
    return tuple(out)


def _coerce(name: str, raw: Any) -> Any:
    kind = KEYS[name].type
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "bool":
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
    except ValueError:
        raise ConfigError(f"{name}: cannot interpret {raw!r} as {kind}") from None
    return text


def read_config_file(path: str | os.PathLike) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    out: dict[str, str] = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected 'key = value'")
        k, v = line.split("=", 1)
        k = key_name(k)
        if k not in KEYS:
            raise ConfigError(f"{path}:{n}: unknown key {k!r}")
        out[k] = v.strip()
    return out


def build_config(
    path: Optional[str | os.PathLike] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> RunConfig:
    """Merge defaults, an optional config file and flag overrides."""
    merged: dict[str, Any] = {}
    if path is not None:
        merged.update(read_config_file(path))
    for k, v in (overrides or {}).items():
        if v is None:
            continue
        k = key_name(k)
        if k not in KEYS:
            raise ConfigError(f"unknown key {k!r}")
        merged[k] = v
    values = {k: _coerce(k, v) for k, v in merged.items()}
    return RunConfig(**values, explicit=frozenset(values))


def replace(config: RunConfig, **changes) -> RunConfig:
    return dataclasses.replace(config, **changes)
