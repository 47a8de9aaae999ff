"""Pipeline configuration and its flat YAML file format.

Keys mirror the parameter symbols (``kappa_spheric``, ``tau_v``, ``N_r``,
``N_FPS``, ``N_patch``, ``H``, ``W``, ``D``, ``delta`` ...); lookup is
case-insensitive.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import yaml

from .bootstrap import SCALES, BootstrapConfig
from .errors import ParameterError
from .patch import DescriptorShape
from .solver import RobustKernel


@dataclass(frozen=True)
class PipelineConfig:
    bootstrap: BootstrapConfig = field(default_factory=BootstrapConfig)
    n_fps: int = 1500
    n_patch: int = 512
    H: int = 7
    W: int = 20
    D: int = 32
    temperature: float = 0.1
    epsilon: float | None = None
    max_candidates: int = 5000
    ransac_max_iters: int = 50_000
    ransac_confidence: float = 0.99
    rng_seed: int = 0
    scales: tuple = SCALES
    refine: bool = False
    kernel: str = "tls"
    c_bar: float | None = None  # defaults to epsilon
    mu: float = 1e4
    delta: float = 1.0  # Huber threshold
    gnc: bool = True

    def __post_init__(self):
        if self.n_fps < 1 or self.n_patch < 5:
            raise ParameterError("n_fps must be >= 1 and n_patch >= 5")
        if not self.temperature > 0:
            raise ParameterError("temperature must be positive")
        if self.epsilon is not None and not self.epsilon > 0:
            raise ParameterError("epsilon must be positive")
        scales = tuple(self.scales)
        if not scales or any(s not in SCALES for s in scales):
            raise ParameterError(f"scales must be a non-empty subset of {SCALES}")
        object.__setattr__(self, "scales", scales)
        DescriptorShape(self.H, self.W, self.D)
        RobustKernel(self.kernel, c_bar=self.c_bar or 1.0, mu=self.mu, delta=self.delta)

    @property
    def shape(self) -> DescriptorShape:
        return DescriptorShape(self.H, self.W, self.D)

    def scale_radii(self, radii: tuple) -> list[float]:
        lookup = dict(zip(SCALES, radii))
        return [lookup[s] for s in self.scales]

    def to_flat(self) -> dict:
        out = {}
        for f in fields(self.bootstrap):
            out[_BOOT_NAMES.get(f.name, f.name)] = getattr(self.bootstrap, f.name)
        for f in fields(self):
            if f.name == "bootstrap":
                continue
            val = getattr(self, f.name)
            out[_TOP_NAMES.get(f.name, f.name)] = list(val) if isinstance(val, tuple) else val
        return out


_BOOT_NAMES = {"n_r": "N_r"}
_TOP_NAMES = {"n_fps": "N_FPS", "n_patch": "N_patch"}


def config_from_dict(data: dict, base: PipelineConfig | None = None) -> PipelineConfig:
    base = base or PipelineConfig()
    boot_fields = {f.name for f in fields(BootstrapConfig)}
    top_fields = {f.name for f in fields(PipelineConfig)} - {"bootstrap"}
    alias = {k.lower(): k for k in boot_fields | top_fields}
    for sym, name in {**_BOOT_NAMES, **_TOP_NAMES}.items():
        alias[name.lower()] = sym
    boot, top = {}, {}
    for key, val in (data or {}).items():
        name = alias.get(str(key).lower())
        if name is None:
            raise ParameterError(f"unknown config key {key!r}")
        if name in boot_fields:
            boot[name] = val
        elif name == "scales":
            top[name] = tuple([val] if isinstance(val, str) else val)
        else:
            top[name] = val
    try:
        return replace(base, bootstrap=replace(base.bootstrap, **boot), **top)
    except TypeError as exc:
        raise ParameterError(str(exc)) from exc


def load_config(path) -> PipelineConfig:
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ParameterError(f"{path}: expected a flat key-value mapping")
    return config_from_dict(data)


def dump_config(cfg: PipelineConfig, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_flat(), fh, sort_keys=False)
