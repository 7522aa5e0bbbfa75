"""Run configuration: strict JSON parsing and a fully resolved provenance copy.

Every section is a frozen dataclass. Parsing rejects unknown keys and values
of the wrong type, fills every omitted field with its default, and
``RunConfig.to_dict`` writes all of them back out, so a run directory's
``config.json`` alone reproduces the run.
"""

import dataclasses
import json
import typing
from dataclasses import dataclass, field

import numpy as np

from .diffusion import OpticalProperties, SceneGeometry
from .estimation import EstimationConfig
from .forward import default_scene
from .montecarlo import McConfig
from .reconstruction import AdmmConfig
from .targets import make_target
from .io import read_image

__all__ = ["ConfigError", "RunConfig", "load_config", "MODES"]

MODES = ("simulate", "kernel", "estimate", "reconstruct", "pipeline")


class ConfigError(ValueError):
    """Invalid run configuration; the message names the offending key."""


@dataclass(frozen=True)
class GeometrySection:
    d1: float = 13.0
    d2: float = 13.0
    nx: int = 32
    ny: int = 32
    pixel_size: float = 2.0
    nt: int = 60
    bin_width: float = 50.0
    source_pixel: typing.Optional[typing.List[int]] = None
    source_bin: int = 0

    def build(self):
        sp = None if self.source_pixel is None else tuple(self.source_pixel)
        return SceneGeometry(self.d1, self.d2, self.nx, self.ny, self.pixel_size,
                             self.nt, self.bin_width, sp, self.source_bin)


@dataclass(frozen=True)
class MediumSection:
    mu_a: float = 0.01
    mu_s_prime: float = 2.0
    g: float = 0.9
    refractive_index: float = 1.4

    def build(self):
        return OpticalProperties(self.mu_a, self.mu_s_prime, self.g, self.refractive_index)


@dataclass(frozen=True)
class TargetSection:
    """``name`` is one of open, wedge, bars, A, or file (read from ``path``)."""

    name: str = "wedge"
    separation: float = 10.0
    path: typing.Optional[str] = None

    def build(self, geometry):
        if self.name == "file":
            if not self.path:
                raise ConfigError("target.path is required when target.name is 'file'")
            return read_image(self.path)
        kw = {"separation": self.separation} if self.name == "bars" else {}
        return make_target(self.name, geometry.nx, geometry.ny, geometry.pixel_size, **kw)


@dataclass(frozen=True)
class MonteCarloSection:
    photons: int = 1_000_000
    split: int = 10
    batch_size: int = 100_000
    spot_sigma: float = 0.0
    mask_outside: float = 0.0
    roulette_weight: float = 1e-4
    roulette_survival: float = 0.1
    prune: bool = False


@dataclass(frozen=True)
class ModelSection:
    """Forward-model variant and illumination used by estimation and reconstruction."""

    image_pairs: typing.Optional[int] = None
    radius: str = "lateral"
    k2_time_offset: float = 0.0
    spot_sigma: float = 0.0
    irf_fwhm: float = 0.0


@dataclass(frozen=True)
class EstimationSection:
    mu_s_init: float = 1.5
    step_size: float = 5e-2
    mu_s_iters: int = 300
    target_iters: int = 50
    outer_alternations: int = 3
    rel_tol: float = 1e-4
    decay: float = 0.9
    epsilon: float = 1e-8
    mu_s_bounds: typing.List[float] = (0.1, 10.0)
    normalize_loss: bool = True
    slope_fraction: float = 0.25
    noise_factor: float = 5.0
    mu_a_mode: str = "model_corrected"


@dataclass(frozen=True)
class AdmmSection:
    rho: float = 1.0
    lambda1: float = 1e-4
    lambda2: typing.Optional[float] = None
    max_iter: int = 50
    abstol: float = 1e-7
    reltol: float = 1e-5
    cg_tol: float = 1e-8
    cg_maxiter: int = 500

    def build(self):
        return AdmmConfig(**dataclasses.asdict(self))


@dataclass(frozen=True)
class ReconstructionSection:
    solver: str = "admm"
    tikhonov_lambda: float = 0.1


@dataclass(frozen=True)
class KernelSection:
    slab: str = "d1"
    time_offset: float = 0.5


@dataclass(frozen=True)
class RunConfig:
    mode: str = "pipeline"
    input: typing.Optional[str] = None
    output_dir: str = "run"
    seed: int = 0
    threads: int = 1
    geometry: GeometrySection = field(default_factory=GeometrySection)
    medium: MediumSection = field(default_factory=MediumSection)
    target: TargetSection = field(default_factory=TargetSection)
    monte_carlo: MonteCarloSection = field(default_factory=MonteCarloSection)
    model: ModelSection = field(default_factory=ModelSection)
    estimation: EstimationSection = field(default_factory=EstimationSection)
    admm: AdmmSection = field(default_factory=AdmmSection)
    reconstruction: ReconstructionSection = field(default_factory=ReconstructionSection)
    kernel: KernelSection = field(default_factory=KernelSection)

    @classmethod
    def from_dict(cls, data):
        cfg = _parse(cls, data, "")
        cfg.validate()
        return cfg

    def to_dict(self):
        return _dump(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def replace(self, **changes):
        cfg = dataclasses.replace(self, **changes)
        cfg.validate()
        return cfg

    def validate(self):
        """Build every derived object once so bad values fail at load time."""
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {list(MODES)}, got {self.mode!r}")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")
        if self.mode in ("estimate", "reconstruct") and not self.input:
            raise ConfigError(f"input is required for mode {self.mode!r}")
        if self.reconstruction.solver not in ("admm", "tikhonov"):
            raise ConfigError("reconstruction.solver must be 'admm' or 'tikhonov'")
        if not self.reconstruction.tikhonov_lambda > 0:
            raise ConfigError("reconstruction.tikhonov_lambda must be positive")
        if self.kernel.slab not in ("d1", "d2"):
            raise ConfigError("kernel.slab must be 'd1' or 'd2'")
        if self.model.radius not in ("lateral", "depth"):
            raise ConfigError("model.radius must be 'lateral' or 'depth'")
        if self.target.name not in ("open", "wedge", "bars", "A", "file"):
            raise ConfigError(f"target.name {self.target.name!r} is not one of open, wedge, bars, A, file")
        if len(self.estimation.mu_s_bounds) != 2:
            raise ConfigError("estimation.mu_s_bounds must have two entries")
        try:
            geo = self.scene_geometry()
            self.optical_properties()
            self.admm_config()
            self.estimation_config()
            if self.target.name != "file":
                self.target.build(geo)
            self.mc_config(mask=np.ones((geo.nx, geo.ny)))
        except ConfigError:
            raise
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from None

    def scene_geometry(self):
        return self.geometry.build()

    def optical_properties(self):
        return self.medium.build()

    def admm_config(self):
        return self.admm.build()

    def estimation_config(self):
        fields = dataclasses.asdict(self.estimation)
        fields["mu_s_bounds"] = tuple(fields["mu_s_bounds"])
        return EstimationConfig(admm=self.admm_config(), **fields)

    def mask(self):
        return self.target.build(self.scene_geometry())

    def mc_config(self, mask=None):
        m = self.medium
        mc = self.monte_carlo
        return McConfig(
            mu_s=m.mu_s_prime / (1.0 - m.g), g=m.g, mu_a=m.mu_a, refractive_index=m.refractive_index,
            geometry=self.scene_geometry(), mask=self.mask() if mask is None else mask,
            photons=mc.photons, seed=self.seed, split=mc.split, batch_size=mc.batch_size,
            mask_outside=mc.mask_outside, roulette_weight=mc.roulette_weight,
            roulette_survival=mc.roulette_survival, prune=mc.prune, spot_sigma=mc.spot_sigma,
        )

    def scene(self, mask=None):
        md = self.model
        return default_scene(
            self.scene_geometry(), self.optical_properties(),
            mask=np.ones((self.geometry.nx, self.geometry.ny)) if mask is None else mask,
            irf_fwhm=md.irf_fwhm or None, spot_sigma=md.spot_sigma or None,
            image_pairs=md.image_pairs, radius=md.radius, k2_time_offset=md.k2_time_offset,
        )


def _type_name(tp):
    return getattr(tp, "__name__", str(tp))


def _coerce(tp, value, where):
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(args[0], value, where)
    if origin in (list, typing.List):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where} must be a list, got {type(value).__name__}")
        (item,) = typing.get_args(tp)
        return tuple(_coerce(item, v, f"{where}[{i}]") for i, v in enumerate(value))
    if dataclasses.is_dataclass(tp):
        return _parse(tp, value, where)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be a boolean, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string, got {value!r}")
        return value
    raise ConfigError(f"{where}: unsupported type {_type_name(tp)}")


def _parse(cls, data, prefix):
    where = prefix or "config"
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a JSON object")
    hints = typing.get_type_hints(cls)
    names = [f.name for f in dataclasses.fields(cls)]
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"unknown field {prefix + '.' if prefix else ''}{unknown[0]}")
    kwargs = {}
    for name in names:
        if name in data:
            kwargs[name] = _coerce(hints[name], data[name], f"{prefix + '.' if prefix else ''}{name}")
    return cls(**kwargs)


def _dump(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _dump(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [_dump(v) for v in obj]
    return obj


def load_config(path=None, overrides=None):
    """Parse a JSON run file (or defaults when ``path`` is None) plus CLI overrides."""
    data = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    for key, value in (overrides or {}).items():
        if value is not None:
            data[key] = value
    return RunConfig.from_dict(data)
