"""Run configuration: YAML loading, validation, presets and round-tripping.

Lengths are given in metres and speeds in km/h. A minimal file::

    classes:
      - {name: Cf, length_m: 4, vmax_kmh: 120}
      - {name: T, length_m: 12, vmax_kmh: 80}
    delta_v_kmh: 40
    law: {type: gamma, gamma: 1.0}
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import yaml

from .model import (
    GammaLaw,
    Mixture,
    ModelError,
    PiecewiseLaw,
    ProbabilityLaw,
    VehicleClass,
    build_grids,
)

__all__ = [
    "ConfigError",
    "ClassSpec",
    "LawSpec",
    "RateSpec",
    "RunConfig",
    "load_config",
    "preset_names",
]


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


def _require(mapping: Mapping[str, Any], key: str, where: str) -> Any:
    if key not in mapping:
        raise ConfigError(f"{where}.{key}: missing required field")
    return mapping[key]


def _number(value: Any, where: str, positive: bool = False, integer: bool = False) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{where}: expected a number, got {value!r}")
    if not math.isfinite(value):
        raise ConfigError(f"{where}: must be finite, got {value!r}")
    if positive and value <= 0:
        raise ConfigError(f"{where}: must be positive, got {value!r}")
    if integer and int(value) != value:
        raise ConfigError(f"{where}: must be an integer, got {value!r}")
    return value


def _reject_unknown(mapping: Mapping[str, Any], allowed: set[str], where: str) -> None:
    extra = sorted(set(mapping) - allowed)
    if extra:
        raise ConfigError(f"{where}: unknown field(s) {', '.join(extra)}")


@dataclass(frozen=True)
class ClassSpec:
    name: str
    length_m: float
    vmax_kmh: float
    delta_v_kmh: float | None = None

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], where: str) -> "ClassSpec":
        if not isinstance(data, Mapping):
            raise ConfigError(f"{where}: expected a mapping")
        _reject_unknown(data, {"name", "length_m", "vmax_kmh", "delta_v_kmh"}, where)
        name = _require(data, "name", where)
        if not isinstance(name, str) or not name or "," in name or "=" in name:
            raise ConfigError(f"{where}.name: expected a non-empty string without ',' or '=', got {name!r}")
        dv = data.get("delta_v_kmh")
        return cls(
            name,
            _number(_require(data, "length_m", where), f"{where}.length_m", positive=True),
            _number(_require(data, "vmax_kmh", where), f"{where}.vmax_kmh", positive=True),
            None if dv is None else _number(dv, f"{where}.delta_v_kmh", positive=True),
        )

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"name": self.name, "length_m": self.length_m, "vmax_kmh": self.vmax_kmh}
        if self.delta_v_kmh is not None:
            out["delta_v_kmh"] = self.delta_v_kmh
        return out


@dataclass(frozen=True)
class LawSpec:
    type: str = "gamma"
    gamma: float | None = None
    s_cr: float | None = None
    mu: float | None = None

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], where: str = "law") -> "LawSpec":
        if not isinstance(data, Mapping):
            raise ConfigError(f"{where}: expected a mapping")
        _reject_unknown(data, {"type", "gamma", "s_cr", "mu"}, where)
        kind = data.get("type", "gamma")
        if kind not in ("gamma", "piecewise"):
            raise ConfigError(f"{where}.type: expected 'gamma' or 'piecewise', got {kind!r}")
        vals = {k: (None if data.get(k) is None else _number(data[k], f"{where}.{k}")) for k in ("gamma", "s_cr", "mu")}
        if kind == "gamma" and (vals["s_cr"] is not None or vals["mu"] is not None):
            raise ConfigError(f"{where}: s_cr and mu only apply to the piecewise law")
        spec = cls(kind, **vals)
        try:
            spec.build()
        except ModelError as exc:
            raise ConfigError(f"{where}: {exc}") from exc
        return spec

    def build(self) -> ProbabilityLaw:
        if self.type == "gamma":
            return GammaLaw(1.0 if self.gamma is None else self.gamma)
        return PiecewiseLaw(
            0.5 if self.s_cr is None else self.s_cr,
            -0.125 if self.mu is None else self.mu,
            self.gamma,
        )

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"type": self.type}
        for key in ("gamma", "s_cr", "mu"):
            if getattr(self, key) is not None:
                out[key] = getattr(self, key)
        return out


@dataclass(frozen=True)
class RateSpec:
    default: float = 1.0
    self_rates: tuple[tuple[str, float], ...] = ()
    cross_rates: tuple[tuple[str, str, float], ...] = ()

    @classmethod
    def from_dict(cls, data: Mapping[str, Any] | None, where: str = "rates") -> "RateSpec":
        if data is None:
            return cls()
        if not isinstance(data, Mapping):
            raise ConfigError(f"{where}: expected a mapping")
        _reject_unknown(data, {"default", "self", "cross"}, where)
        default = _number(data.get("default", 1.0), f"{where}.default", positive=True)
        self_rates = tuple(
            (str(k), _number(v, f"{where}.self.{k}", positive=True)) for k, v in (data.get("self") or {}).items()
        )
        cross = []
        for key, v in (data.get("cross") or {}).items():
            parts = str(key).split("->")
            if len(parts) != 2 or not all(parts):
                raise ConfigError(f"{where}.cross.{key}: keys must look like 'P->Q'")
            cross.append((parts[0].strip(), parts[1].strip(), _number(v, f"{where}.cross.{key}", positive=True)))
        return cls(default, self_rates, tuple(cross))

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"default": self.default}
        if self.self_rates:
            out["self"] = {k: v for k, v in self.self_rates}
        if self.cross_rates:
            out["cross"] = {f"{p}->{q}": v for p, q, v in self.cross_rates}
        return out


@dataclass(frozen=True)
class RunConfig:
    """Validated run configuration.

    All model preconditions are checked at construction; errors name the
    offending field.
    """

    classes: tuple[ClassSpec, ...]
    delta_v_kmh: float = 40.0
    law: LawSpec = field(default_factory=LawSpec)
    rates: RateSpec = field(default_factory=RateSpec)
    grid_r: int = 1
    s_points: int = 200
    samples_per_s: int = 3
    seed: int = 0
    tolerance: float = 1e-12
    t_max: float | None = None
    max_steps: int = 200_000
    sampling: str = "scatter"
    s: float | None = None
    densities: tuple[tuple[str, float], ...] = ()
    test_hooks: tuple[tuple[str, Any], ...] = ()

    _KEYS = (
        "classes", "delta_v_kmh", "law", "rates", "grid_r", "s_points", "samples_per_s", "seed",
        "tolerance", "t_max", "max_steps", "sampling", "s", "densities", "test_hooks",
    )

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunConfig":
        if not isinstance(data, Mapping):
            raise ConfigError("config: top level must be a mapping")
        _reject_unknown(data, set(cls._KEYS), "config")
        raw_classes = _require(data, "classes", "config")
        if not isinstance(raw_classes, list) or not raw_classes:
            raise ConfigError("config.classes: expected a non-empty list")
        classes = tuple(ClassSpec.from_dict(c, f"classes[{i}]") for i, c in enumerate(raw_classes))
        names = [c.name for c in classes]
        if len(set(names)) != len(names):
            raise ConfigError(f"config.classes: duplicate class names {names}")
        kw: dict[str, Any] = {"classes": classes}
        if "delta_v_kmh" in data:
            kw["delta_v_kmh"] = _number(data["delta_v_kmh"], "config.delta_v_kmh", positive=True)
        if "law" in data:
            kw["law"] = LawSpec.from_dict(data["law"])
        kw["rates"] = RateSpec.from_dict(data.get("rates"))
        for key, integer in (("grid_r", True), ("s_points", True), ("samples_per_s", True), ("seed", True), ("max_steps", True)):
            if key in data:
                kw[key] = int(_number(data[key], f"config.{key}", integer=True))
        if "tolerance" in data:
            kw["tolerance"] = _number(data["tolerance"], "config.tolerance", positive=True)
        if data.get("t_max") is not None:
            kw["t_max"] = _number(data["t_max"], "config.t_max", positive=True)
        if "sampling" in data:
            kw["sampling"] = data["sampling"]
        if data.get("s") is not None:
            kw["s"] = _number(data["s"], "config.s")
        if data.get("densities") is not None:
            dens = data["densities"]
            if not isinstance(dens, Mapping):
                raise ConfigError("config.densities: expected a mapping of class name to veh/km")
            kw["densities"] = tuple((str(k), _number(v, f"config.densities.{k}")) for k, v in dens.items())
        if data.get("test_hooks") is not None:
            hooks = data["test_hooks"]
            if not isinstance(hooks, Mapping):
                raise ConfigError("config.test_hooks: expected a mapping")
            kw["test_hooks"] = tuple((str(k), v) for k, v in hooks.items())
        return cls(**kw)

    def __post_init__(self) -> None:
        if self.grid_r < 1:
            raise ConfigError(f"config.grid_r: must be a positive integer, got {self.grid_r!r}")
        if self.s_points < 2:
            raise ConfigError(f"config.s_points: must be at least 2, got {self.s_points!r}")
        if self.samples_per_s < 1:
            raise ConfigError(f"config.samples_per_s: must be at least 1, got {self.samples_per_s!r}")
        if self.max_steps < 1:
            raise ConfigError(f"config.max_steps: must be positive, got {self.max_steps!r}")
        if self.sampling not in ("scatter", "frozen"):
            raise ConfigError(f"config.sampling: expected 'scatter' or 'frozen', got {self.sampling!r}")
        if self.s is not None and not (0.0 <= self.s <= 1.0):
            raise ConfigError(f"config.s: must lie in [0, 1], got {self.s!r}")
        names = [c.name for c in self.classes]
        for i, c in enumerate(self.classes):
            try:
                VehicleClass(c.name, c.length_m / 1000.0, c.vmax_kmh, c.delta_v_kmh or self.delta_v_kmh)
            except ModelError as exc:
                raise ConfigError(f"classes[{i}] ({c.name}): {exc}") from exc
        for name, value in self.densities:
            if name not in names:
                raise ConfigError(f"config.densities.{name}: unknown class")
            if value < 0:
                raise ConfigError(f"config.densities.{name}: must be non-negative")
        for name, _ in self.rates.self_rates:
            if name not in names:
                raise ConfigError(f"rates.self.{name}: unknown class")
        for p, q, _ in self.rates.cross_rates:
            if p not in names or q not in names or p == q:
                raise ConfigError(f"rates.cross.{p}->{q}: must name two different known classes")
        try:
            build_grids(self.vehicle_classes(), self.grid_r)
        except ModelError as exc:
            raise ConfigError(f"config.classes: {exc}") from exc

    # -- conversions -------------------------------------------------------

    def vehicle_classes(self) -> tuple[VehicleClass, ...]:
        return tuple(
            VehicleClass(c.name, c.length_m / 1000.0, c.vmax_kmh, c.delta_v_kmh or self.delta_v_kmh)
            for c in self.classes
        )

    def probability_law(self) -> ProbabilityLaw:
        return self.law.build()

    def rate_matrix(self) -> np.ndarray:
        return Mixture.from_rate_overrides(
            self.vehicle_classes(),
            [0.0] * len(self.classes),
            self.rates.default,
            dict(self.rates.self_rates),
            {(p, q): v for p, q, v in self.rates.cross_rates},
        ).rates

    def mixture(self, densities: Mapping[str, float] | None = None) -> Mixture:
        """Mixture with the configured rates and the resolved densities."""
        return Mixture(self.vehicle_classes(), tuple(self.resolve_densities(densities)), self.rate_matrix())

    def resolve_densities(self, overrides: Mapping[str, float] | None = None, s: float | None = None) -> list[float]:
        """Densities from explicit values, else from ``s`` split evenly by occupancy.

        Classes without an explicit value get zero density when any value is
        given.
        """
        classes = self.vehicle_classes()
        explicit = dict(self.densities)
        explicit.update(overrides or {})
        for name in explicit:
            if name not in [c.id for c in classes]:
                raise ConfigError(f"densities.{name}: unknown class")
        s = self.s if s is None else s
        if explicit:
            return [float(explicit.get(c.id, 0.0)) for c in classes]
        if s is None:
            raise ConfigError("config: give either densities or an occupied fraction s")
        if not (0.0 <= s <= 1.0):
            raise ConfigError(f"s: must lie in [0, 1], got {s!r}")
        return [s / len(classes) / c.length for c in classes]

    def hook(self, name: str, default: Any = None) -> Any:
        return dict(self.test_hooks).get(name, default)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "classes": [c.to_dict() for c in self.classes],
            "delta_v_kmh": self.delta_v_kmh,
            "law": self.law.to_dict(),
            "rates": self.rates.to_dict(),
            "grid_r": self.grid_r,
            "s_points": self.s_points,
            "samples_per_s": self.samples_per_s,
            "seed": self.seed,
            "tolerance": self.tolerance,
            "max_steps": self.max_steps,
            "sampling": self.sampling,
        }
        if self.t_max is not None:
            out["t_max"] = self.t_max
        if self.s is not None:
            out["s"] = self.s
        if self.densities:
            out["densities"] = dict(self.densities)
        if self.test_hooks:
            out["test_hooks"] = dict(self.test_hooks)
        return out

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def replace(self, **changes: Any) -> "RunConfig":
        data = {f.name: getattr(self, f.name) for f in fields(self)}
        data.update(changes)
        return RunConfig(**data)


def preset_names() -> list[str]:
    folder = resources.files("kinetraf") / "presets"
    return sorted(p.name[: -len(".yaml")] for p in folder.iterdir() if p.name.endswith(".yaml"))


def load_config(source: str | Path) -> RunConfig:
    """Load a YAML file, or a bundled preset by name.

    Raises
    ------
    ConfigError
        For malformed YAML or invalid fields.
        Also for a bare name that is neither a file nor a preset.
    OSError
        When the file cannot be read.
    """
    src = str(source)
    path = Path(src)
    if not path.exists() and src in preset_names():
        text = (resources.files("kinetraf") / "presets" / f"{src}.yaml").read_text(encoding="utf-8")
    elif not path.exists() and not path.suffix and len(path.parts) == 1:
        raise ConfigError(f"config: {src!r} is neither a file nor a preset ({', '.join(preset_names())})")
    else:
        text = path.read_text(encoding="utf-8")
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config: malformed YAML ({exc})") from exc
    return RunConfig.from_dict(data)

