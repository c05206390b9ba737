"""Flat key=value config files with a closed schema.

Sections are spelled with dotted keys (`pyramid.f4.r=1`). Unknown keys are hard
errors; a handful of keys are required only when the command actually needs
them (stage steps / learning rate). `resolve` materializes every default so a
`config.resolved` file pins the entire run.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .errors import ConfigError

STAGES = ("t2v", "adapters", "joint")


@dataclass(frozen=True)
class Key:
    type: type
    default: Any  # None means "required when used"
    choices: tuple | None = None


def _schema() -> dict[str, Key]:
    s: dict[str, Key] = {
        "seed": Key(int, 0),
        "model.codec": Key(str, "identity", ("identity", "patchify2")),
        "model.channels.f1": Key(int, 32),
        "model.channels.f2": Key(int, 64),
        "model.channels.f4": Key(int, 128),
        "model.channels.f8": Key(int, 128),
        "model.heads": Key(int, 4),
        "model.cond_dim": Key(int, 32),
        "model.temb_dim": Key(int, 64),
        "model.patch": Key(int, 8),
        "model.text_max_len": Key(int, 8),
        "diffusion.T": Key(int, 1000),
        "diffusion.beta_min": Key(float, 1e-4),
        "diffusion.beta_max": Key(float, 0.02),
        "train.ckpt_every": Key(int, 500),
        "train.clip_norm": Key(float, 1.0),
        # derived at train time (0 = unset); present so resolved configs re-parse
        "data.frames": Key(int, 0),
        "data.height": Key(int, 0),
        "data.width": Key(int, 0),
        "model.in_channels": Key(int, 0),
        "model.latent_height": Key(int, 0),
        "model.latent_width": Key(int, 0),
        "model.image_tokens": Key(int, 0),
    }
    for f in (1, 2, 4, 8):
        s[f"pyramid.f{f}.r"] = Key(int, 0)  # 0 = auto (frame-count default)
        s[f"pyramid.f{f}.k"] = Key(int, 0)
    defaults_fraction = {"t2v": 0.0, "adapters": 0.0, "joint": 0.25}
    for stage in STAGES:
        s[f"train.{stage}.steps"] = Key(int, None)
        s[f"train.{stage}.lr"] = Key(float, None)
        s[f"train.{stage}.momentum"] = Key(float, 0.9)
        s[f"train.{stage}.image_fraction"] = Key(float, defaults_fraction[stage])
        s[f"train.{stage}.p_drop_text"] = Key(float, 0.1)
        s[f"train.{stage}.p_drop_image"] = Key(float, 0.1)
    return s


SCHEMA = _schema()


def parse_config(text: str) -> dict[str, Any]:
    """Parse key=value lines ('#' comments and blank lines allowed)."""
    values: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key: {key}")
        if key in values:
            raise ConfigError(f"duplicate config key: {key}")
        spec = SCHEMA[key]
        try:
            if spec.type is int:
                parsed: Any = int(val)
            elif spec.type is float:
                parsed = float(val)
            else:
                parsed = val
        except ValueError as exc:
            raise ConfigError(f"config key {key}: cannot parse {val!r} as {spec.type.__name__}") from exc
        if spec.choices and parsed not in spec.choices:
            raise ConfigError(f"config key {key}: {parsed!r} not in {spec.choices}")
        values[key] = parsed
    return values


def load_config(path: str | Path) -> dict[str, Any]:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def resolve(values: dict[str, Any]) -> dict[str, Any]:
    """Fill defaults for every key; required-but-unset keys stay None."""
    out = {}
    for key, spec in SCHEMA.items():
        out[key] = values.get(key, spec.default)
    return out


def require(cfg: dict[str, Any], key: str):
    if cfg.get(key) is None:
        raise ConfigError(f"missing required config key: {key}")
    return cfg[key]


def serialize(cfg: dict[str, Any]) -> str:
    lines = []
    for key in sorted(cfg):
        value = cfg[key]
        if value is None:
            continue
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"
