"""Run configuration: TOML file plus ``TABLETOP_AGENT_*`` environment overrides.

Example::

    scenario = "carrot_on_plate"
    seed = 0
    loop_limit = 2

    [backends]
    default = "scripted:oracle"          # or "live:<url>" / "scripted:<transcript.json>"
    plan = "live:http://localhost:8000/v1/chat/completions"

    [backends.options]
    model_name = "my-model"
    api_key_env = "MODEL_API_KEY"
    max_retries = 2

    [noise]
    center_jitter_sigma_m = 0.02
    drop_prob = 0.05
"""

from __future__ import annotations

import dataclasses
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional

from ..errors import ConfigError
from ..gateway import BackendProfile
from ..simworld import BUILTIN_SCENARIOS, NoiseSpec, Region, Scenario, load_scenario

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

ROLES = ("scene", "status", "plan", "keywords", "disambiguate", "action")
ENV_PREFIX = "TABLETOP_AGENT_"
_PROFILE_OPTIONS = ("model_name", "api_key_env", "timeout", "max_retries", "simulated_latency")


@dataclass
class RunConfig:
    scenario: str = "carrot_on_plate"
    task: str = ""
    seed: int = 0
    loop_limit: int = 2
    grasp_radius: float = 0.05
    success_threshold: Optional[float] = None
    approach_height: float = 0.10
    cache_path: str = ""
    episode_cap: int = 10
    episode_timeout: float = 300.0
    step_time: float = 1.0
    backends: dict[str, str] = field(default_factory=lambda: {"default": "scripted:oracle"})
    backend_options: dict[str, Any] = field(default_factory=dict)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    unreachable: tuple[Region, ...] = ()
    base_dir: str = "."

    def __post_init__(self):
        if self.loop_limit < 1:
            raise ConfigError("loop_limit must be >= 1")
        if self.grasp_radius <= 0:
            raise ConfigError("grasp_radius must be positive")
        if self.episode_cap < 1 or self.episode_timeout <= 0:
            raise ConfigError("episode_cap and episode_timeout must be positive")
        if self.success_threshold is not None and self.success_threshold <= 0:
            raise ConfigError("success_threshold must be positive")
        unknown = set(self.backends) - set(ROLES) - {"default"}
        if unknown:
            raise ConfigError(f"unknown backend roles {sorted(unknown)}")
        bad = set(self.backend_options) - set(_PROFILE_OPTIONS)
        if bad:
            raise ConfigError(f"unknown backend options {sorted(bad)}")

    def profile(self, role: str) -> BackendProfile:
        spec = self.backends.get(role) or self.backends.get("default")
        if not spec:
            raise ConfigError(f"no backend configured for role {role!r}")
        try:
            profile = BackendProfile.parse(spec, **self.backend_options)
        except TypeError as e:
            raise ConfigError(str(e)) from e
        if profile.kind == "scripted" and profile.transcript != "oracle":
            path = Path(profile.transcript)
            if not path.is_absolute():
                path = Path(self.base_dir) / path
            profile = dataclasses.replace(profile, transcript=str(path))
        return profile

    def load_scenario(self) -> Scenario:
        name = self.scenario
        if name not in BUILTIN_SCENARIOS and not Path(name).is_absolute():
            name = str(Path(self.base_dir) / name)
        scenario = load_scenario(name)
        if self.success_threshold is not None:
            goals = tuple(dataclasses.replace(g, threshold=self.success_threshold) for g in scenario.goals)
            scenario = dataclasses.replace(scenario, goals=goals)
        return scenario

    def validate(self) -> "RunConfig":
        """Check that referenced assets exist."""
        self.load_scenario()
        for role in ROLES:
            p = self.profile(role)
            if p.kind == "scripted" and p.transcript != "oracle" and not Path(p.transcript).exists():
                raise ConfigError(f"transcript for {role} not found: {p.transcript}")
        if self.cache_path and not Path(self.cache_path).parent.exists():
            raise ConfigError(f"cache directory does not exist: {Path(self.cache_path).parent}")
        return self


_SCALARS = {
    f.name: f.type
    for f in dataclasses.fields(RunConfig)
    if f.name not in ("backends", "backend_options", "noise", "unreachable", "base_dir")
}


def _coerce(name: str, value: Any) -> Any:
    kind = _SCALARS[name]
    try:
        if kind == "int":
            return int(value)
        if kind in ("float", "Optional[float]"):
            return None if value in ("", None) else float(value)
        return str(value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad value for {name}: {value!r}") from e


def config_from_dict(data: Mapping[str, Any], base_dir: str = ".") -> RunConfig:
    data = dict(data)
    kw: dict[str, Any] = {"base_dir": base_dir}
    backends = dict(data.pop("backends", {}))
    options = backends.pop("options", {})
    if backends:
        kw["backends"] = {k: str(v) for k, v in backends.items()}
    kw["backend_options"] = dict(options)
    if "noise" in data:
        try:
            kw["noise"] = NoiseSpec(**data.pop("noise"))
        except (TypeError, ValueError) as e:
            raise ConfigError(f"bad noise section: {e}") from e
    if "unreachable" in data:
        try:
            kw["unreachable"] = tuple(Region.column(float(x), float(y), float(h)) for x, y, h in data.pop("unreachable"))
        except (TypeError, ValueError) as e:
            raise ConfigError(f"unreachable entries must be [x, y, half_width]: {e}") from e
    data.pop("collect", None)
    for key, value in data.items():
        if key not in _SCALARS:
            raise ConfigError(f"unknown config key {key!r}")
        kw[key] = _coerce(key, value)
    return RunConfig(**kw)


def apply_env(config: RunConfig, environ: Mapping[str, str]) -> RunConfig:
    """``TABLETOP_AGENT_<KEY>`` overrides top-level keys; ``TABLETOP_AGENT_BACKEND``
    overrides the default backend."""
    changes: dict[str, Any] = {}
    for key in _SCALARS:
        env_key = ENV_PREFIX + key.upper()
        if env_key in environ:
            changes[key] = _coerce(key, environ[env_key])
    if ENV_PREFIX + "BACKEND" in environ:
        changes["backends"] = {**config.backends, "default": environ[ENV_PREFIX + "BACKEND"]}
    return dataclasses.replace(config, **changes) if changes else config


def read_toml(path: str | os.PathLike) -> dict:
    try:
        with open(path, "rb") as f:
            return tomllib.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except (OSError, tomllib.TOMLDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e


def load_config(path: Optional[str | os.PathLike] = None, environ: Optional[Mapping[str, str]] = None) -> RunConfig:
    data = read_toml(path) if path else {}
    base = str(Path(path).resolve().parent) if path else "."
    config = apply_env(config_from_dict(data, base), os.environ if environ is None else environ)
    return config.validate()
