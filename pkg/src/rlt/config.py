"""INI configuration: one file drives demo generation, Stage-1 token
training and Stage-2 online RL, so shared fields (chunk sizes, tolerances)
cannot silently diverge between stages.

Sections: [env] [stub] [token] [rl] [run]. Unknown sections or keys are
errors naming the offending path; every key has a documented default and
the fully resolved config is echoed into the run directory.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields

from .orchestrate import RunConfig
from .simenv import EpisodeConfig
from .vlastub import StubConfig


class ConfigError(ValueError):
    def __init__(self, message: str, key_path: str | None = None):
        super().__init__(message)
        self.key_path = key_path


@dataclass
class TokenConfig:
    steps: int = 4000
    batch: int = 64
    lr: float = 3e-4
    log_every: int = 50


@dataclass
class DemoConfig:
    n_demos: int = 50
    demo_noise: float = 0.05
    demo_chunk_len: int = 10


# [rl] keys land on RunConfig alongside [run] keys; split kept for readability.
_RL_KEYS = {
    "gamma", "beta", "p_ref", "sigma", "tau", "lr_actor", "lr_critic",
    "critic_layernorm", "batch_size", "replay_capacity", "divergence_factor",
}
_RUN_KEYS = {
    "n_warm", "utd", "chunk_len", "horizon", "stride", "episode_budget",
    "eval_cadence", "eval_episodes", "early_stop_success", "restore_best_eval", "phase_mode",
    "async_mode", "intervention_prob", "intervention_episodes",
    "intervention_min_dist", "handover_dist", "log_every",
}


@dataclass
class FullConfig:
    env: EpisodeConfig = field(default_factory=EpisodeConfig)
    stub: StubConfig = field(default_factory=StubConfig)
    demo: DemoConfig = field(default_factory=DemoConfig)
    token: TokenConfig = field(default_factory=TokenConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def validate(self):
        try:
            self.run.validate()
            self.env.validate()
        except ValueError as e:
            raise ConfigError(str(e)) from e
        if self.token.steps < 0:
            raise ConfigError("token.steps must be >= 0", "token.steps")
        if self.demo.n_demos < 0:
            raise ConfigError("stub.n_demos must be >= 0", "stub.n_demos")
        if not 0.0 <= self.stub.probe_prob <= 1.0:
            raise ConfigError("stub.probe_prob must be in [0, 1]", "stub.probe_prob")


def _coerce(section: str, key: str, raw: str, target_type):
    raw = raw.strip()
    path = f"{section}.{key}"
    if raw.lower() in ("none", "null", ""):
        return None
    try:
        if target_type is bool:
            if raw.lower() in ("true", "1", "yes", "on"):
                return True
            if raw.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
        return raw
    except ValueError as e:
        raise ConfigError(
            f"{path}: cannot parse {raw!r} as {target_type.__name__}", path
        ) from e


def _field_types(dc) -> dict[str, type]:
    out = {}
    for f in fields(dc):
        t = f.type
        if isinstance(t, str):
            base = t.replace(" ", "")
            if base.startswith("int"):
                out[f.name] = int
            elif base.startswith("float"):
                out[f.name] = float
            elif base.startswith("bool"):
                out[f.name] = bool
            else:
                out[f.name] = str
        else:
            out[f.name] = t
    return out


def load_config(path=None, seed: int | None = None, overrides: dict | None = None) -> FullConfig:
    """Parse, type-check and range-check a config file (all-defaults when
    path is None or the file is empty)."""
    cfg = FullConfig()
    targets = {
        "env": (cfg.env, set(_field_types(EpisodeConfig)) - {"seed"}),
        "stub": (None, None),  # split between StubConfig and DemoConfig below
        "token": (cfg.token, set(_field_types(TokenConfig))),
        "rl": (cfg.run, _RL_KEYS),
        "run": (cfg.run, _RUN_KEYS),
    }
    stub_types = _field_types(StubConfig)
    demo_types = _field_types(DemoConfig)

    if path is not None:
        parser = configparser.ConfigParser()
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except configparser.Error as e:
            raise ConfigError(f"config parse error in {path}: {e}")
        for section in parser.sections():
            if section not in targets:
                raise ConfigError(f"unknown config section [{section}]", section)
            for key, raw in parser.items(section):
                if section == "stub":
                    if key in stub_types:
                        setattr(cfg.stub, key, _coerce(section, key, raw, stub_types[key]))
                    elif key in demo_types:
                        setattr(cfg.demo, key, _coerce(section, key, raw, demo_types[key]))
                    else:
                        raise ConfigError(f"unknown config key stub.{key}", f"stub.{key}")
                    continue
                obj, allowed = targets[section]
                if key not in allowed:
                    raise ConfigError(f"unknown config key {section}.{key}", f"{section}.{key}")
                types = _field_types(type(obj))
                setattr(obj, key, _coerce(section, key, raw, types[key]))

    if seed is not None:
        cfg.run.seed = seed
        cfg.env.seed = seed
    for path_key, value in (overrides or {}).items():
        section, key = path_key.split(".", 1)
        obj = {"env": cfg.env, "stub": cfg.stub, "token": cfg.token, "rl": cfg.run, "run": cfg.run}[section]
        setattr(obj, key, value)
    cfg.validate()
    return cfg


def resolved_text(cfg: FullConfig) -> str:
    """Render the fully resolved config (defaults included) as INI text."""

    def fmt(v):
        return "none" if v is None else str(v)

    lines = []
    lines.append("[env]")
    for f in fields(EpisodeConfig):
        if f.name == "seed":
            continue
        lines.append(f"{f.name} = {fmt(getattr(cfg.env, f.name))}")
    lines.append("")
    lines.append("[stub]")
    for f in fields(StubConfig):
        lines.append(f"{f.name} = {fmt(getattr(cfg.stub, f.name))}")
    for f in fields(DemoConfig):
        lines.append(f"{f.name} = {fmt(getattr(cfg.demo, f.name))}")
    lines.append("")
    lines.append("[token]")
    for f in fields(TokenConfig):
        lines.append(f"{f.name} = {fmt(getattr(cfg.token, f.name))}")
    lines.append("")
    lines.append("[rl]")
    for key in sorted(_RL_KEYS):
        lines.append(f"{key} = {fmt(getattr(cfg.run, key))}")
    lines.append("")
    lines.append("[run]")
    for key in sorted(_RUN_KEYS):
        lines.append(f"{key} = {fmt(getattr(cfg.run, key))}")
    lines.append("")
    return "\n".join(lines)
