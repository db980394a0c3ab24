"""Pipeline configuration files.

Example::

    input.meta = "scan.txt"
    input.raw = "scan.raw"
    cell_dims = [40, 40, 1]
    n_lags = [36, 36, 0]
    fit_mode = "matern"
    output_dir = "run"
    generate.count = 100
    generate.seed = 7
    qoi.kind = "porosity"
    mlmc.rel_tol = 0.05

Relative paths are resolved against the directory holding the config file.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from . import kvtext
from .mlmc import MLMCConfig
from .qoi import QOI_KINDS, ElasticitySetup


class ConfigError(ValueError):
    pass


@dataclass
class InputSection:
    meta: str = ""
    raw: str = ""


@dataclass
class GenerateSection:
    count: int = 10
    seed: int = 0
    start_index: int = 0
    grid_dims: list[int] | None = None
    save_volumes: bool = True
    hist_bins: int = 30


@dataclass
class QoISection:
    kind: str = "porosity"
    levels: int = 4
    E_material: float = 1.0
    poisson: float = 0.3
    applied_strain: float = 1e-3
    load_axis: int = 0
    void_factor: float = 1e-9

    def setup(self) -> ElasticitySetup:
        return ElasticitySetup(self.E_material, self.poisson, self.applied_strain, self.load_axis, self.void_factor)


@dataclass
class MLMCSection:
    rel_tol: float = 0.05
    screening_levels: int = 4
    pilot_samples: int = 20
    max_level: int | None = None
    seed: int = 0
    cost_mode: str = "dofs"
    max_samples: int = 1_000_000
    max_rounds: int = 10
    confidence: float | None = None

    def config(self) -> MLMCConfig:
        return MLMCConfig(
            rel_tol=self.rel_tol,
            screening_levels=self.screening_levels,
            pilot_samples=self.pilot_samples,
            max_level=self.max_level,
            seed=self.seed,
            cost_mode=self.cost_mode,
            max_samples=self.max_samples,
            max_rounds=self.max_rounds,
            confidence=self.confidence,
        )


_SECTIONS = {"input": InputSection, "generate": GenerateSection, "qoi": QoISection, "mlmc": MLMCSection}


@dataclass
class PipelineConfig:
    cell_dims: list[int] = field(default_factory=lambda: [1, 1, 1])
    n_lags: list[int] = field(default_factory=lambda: [0, 0, 0])
    fit_mode: str = "matern"
    output_dir: str = "run"
    input: InputSection = field(default_factory=InputSection)
    generate: GenerateSection = field(default_factory=GenerateSection)
    qoi: QoISection = field(default_factory=QoISection)
    mlmc: MLMCSection = field(default_factory=MLMCSection)
    base_dir: Path = field(default=Path("."), compare=False, repr=False)

    def validate(self) -> "PipelineConfig":
        if len(self.cell_dims) != 3 or min(self.cell_dims) < 1:
            raise ConfigError(f"cell_dims must be three positive integers, got {self.cell_dims}")
        if len(self.n_lags) != 3 or min(self.n_lags) < 0:
            raise ConfigError(f"n_lags must be three nonnegative integers, got {self.n_lags}")
        if self.fit_mode not in ("matern", "gaussian"):
            raise ConfigError(f"fit_mode must be 'matern' or 'gaussian', got {self.fit_mode!r}")
        if self.qoi.kind not in QOI_KINDS:
            raise ConfigError(f"qoi.kind must be one of {QOI_KINDS}, got {self.qoi.kind!r}")
        if self.generate.count < 0:
            raise ConfigError("generate.count must be nonnegative")
        try:
            self.qoi.setup()
            self.mlmc.config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    def path(self, p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else self.base_dir / q

    @property
    def out(self) -> Path:
        return self.path(self.output_dir)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d.pop("base_dir")
        return d

    def to_text(self) -> str:
        return kvtext.dumps(kvtext.flatten(self.to_dict()))

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict[str, Any], base_dir=".") -> "PipelineConfig":
        kwargs: dict[str, Any] = {}
        top = {f.name for f in fields(cls)} - {"base_dir"} - set(_SECTIONS)
        for key, value in d.items():
            if key in _SECTIONS:
                if not isinstance(value, dict):
                    raise ConfigError(f"{key!r} must be a group of dotted keys")
                sec = _SECTIONS[key]
                known = {f.name for f in fields(sec)}
                unknown = set(value) - known
                if unknown:
                    raise ConfigError(f"unknown keys in {key}: {sorted(unknown)}")
                kwargs[key] = sec(**value)
            elif key in top:
                kwargs[key] = value
            else:
                raise ConfigError(f"unknown config key {key!r}")
        try:
            cfg = cls(**kwargs, base_dir=Path(base_dir))
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        return cfg.validate()

    @classmethod
    def from_text(cls, text: str, base_dir=".") -> "PipelineConfig":
        try:
            flat = kvtext.loads(text)
            nested = kvtext.nest(flat)
        except kvtext.KVSyntaxError as exc:
            raise ConfigError(str(exc)) from None
        return cls.from_dict(nested, base_dir)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_text(text, path.parent)
