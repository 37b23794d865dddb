"""Flat ``key = value`` configuration files for :class:`TrainConfig`.

Precedence, lowest first: built-in defaults, ``preset``, file values, command
line overrides.  When ``epochs`` is changed but ``milestones`` is not given,
the preset's milestones are stretched proportionally onto the new length.
Unknown keys, duplicate keys and unparsable values are errors that name the
key and line.

=====================  ===================  ==========================================
key                    default              meaning
=====================  ===================  ==========================================
n                      3                    patches per side
size                   96                   working resolution (multiple of 4)
sigma                  none                 target sigma in heatmap px (none = auto)
epochs                 40                   training epochs
batch                  16                   batch size
seed                   0                    base seed
lr                     1e-3                 base learning rate
milestones             30:1e-4,36:1e-5      ``epoch:lr`` step-decay points
eps                    none                 jigsaw match radius, heatmap px
fraction               1.0                  labelled fraction for finetuning
freeze_depth           0                    leading layer groups frozen (0..6)
concat_unshuffled      false                add the unshuffled image as 3 more channels
scale_aug              0.35                 scale range, +-fraction
rotate_aug             45                   rotation range, +-degrees
translate_aug          0.10                 translation range, +-fraction per axis
flip_prob              0.5                  horizontal flip probability (finetune)
color_aug              true                 colour augmentation on pretext inputs
keypoint_sigma         1.0                  keypoint target sigma, heatmap px
eval_every             5                    held-out evaluation cadence, epochs
select                 best                 keep ``best`` or ``final`` pretext weights
threads                0                    BLAS threads (0 = library default)
deterministic          false                single-threaded, fixed-order execution
preset                 desk                 ``desk`` or ``paper``
=====================  ===================  ==========================================
"""

from __future__ import annotations

import re
from dataclasses import replace

from .train import CONFIG_FIELDS, PAPER_PRESET, TrainConfig

PRESETS = {"desk": {}, "paper": PAPER_PRESET}


class ConfigError(ValueError):
    pass


def parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_milestones(text: str) -> tuple[tuple[int, float], ...]:
    text = text.strip()
    if text in ("", "none"):
        return ()
    out = []
    for item in text.split(","):
        epoch, sep, lr = item.partition(":")
        if not sep:
            raise ValueError(f"milestone {item!r} is not epoch:lr")
        out.append((int(epoch), float(lr)))
    return tuple(out)


def format_milestones(milestones) -> str:
    return ",".join(f"{e}:{lr:g}" for e, lr in milestones) or "none"


def scale_milestones(milestones, base_epochs: int, epochs: int) -> tuple[tuple[int, float], ...]:
    """Stretch ``milestones`` defined for ``base_epochs`` onto ``epochs``.

    Milestones that land on epoch 0, at or past the end, or on an epoch
    already used are dropped.
    """
    out = []
    for epoch, lr in milestones:
        e = (epoch * epochs) // base_epochs
        if 0 < e < epochs and (not out or e > out[-1][0]):
            out.append((e, lr))
    return tuple(out)


def parse_value(key: str, text: str):
    """Convert ``text`` to the type of config field ``key``."""
    if key == "preset":
        text = text.strip()
        if text not in PRESETS:
            raise ValueError(f"unknown preset {text!r}; choose from {sorted(PRESETS)}")
        return text
    if key not in CONFIG_FIELDS:
        raise KeyError(key)
    if key == "milestones":
        return parse_milestones(text)
    hint = CONFIG_FIELDS[key].type
    text = text.strip()
    if "None" in hint and text.lower() == "none":
        return None
    if hint.startswith("bool"):
        return parse_bool(text)
    if hint.startswith("int"):
        return int(text)
    if hint.startswith("float"):
        return float(text)
    return text


def apply_preset(config: TrainConfig, name: str) -> TrainConfig:
    return replace(config, **PRESETS[name])


def read_config_values(path) -> dict[str, tuple[object, int]]:
    """``{key: (value, line_number)}`` from a config file."""
    values: dict[str, tuple[object, int]] = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, text = line.partition("=")
            key = key.strip()
            if not sep:
                raise ConfigError(f"{path}:{lineno}: expected key = value, got {line!r}")
            if key in values:
                raise ConfigError(f"{path}:{lineno}: duplicate key {key!r} "
                                  f"(first set on line {values[key][1]})")
            try:
                values[key] = (parse_value(key, text), lineno)
            except KeyError:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}") from None
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: bad value for {key!r}: {exc}") from None
    return values


def build_config(file_values: dict[str, tuple[object, int]] | None = None,
                 overrides: dict[str, object] | None = None, source: str = "<config>") -> TrainConfig:
    file_values = dict(file_values or {})
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    preset = overrides.pop("preset", None) or file_values.pop("preset", ("desk", 0))[0]
    config = apply_preset(TrainConfig(), preset)
    lines = {}
    for key, (value, lineno) in file_values.items():
        config = replace(config, **{key: value})
        lines[key] = lineno
    unknown = set(overrides) - set(CONFIG_FIELDS)
    if unknown:
        raise ConfigError(f"unknown option {sorted(unknown)[0]!r}")
    config = replace(config, **overrides)
    if "milestones" not in file_values and "milestones" not in overrides:
        base = apply_preset(TrainConfig(), preset)
        config = replace(config, milestones=scale_milestones(base.milestones, base.epochs,
                                                             config.epochs))
    try:
        return config.validate()
    except ValueError as exc:
        key = _key_of(str(exc))
        where = f"{source}:{lines[key]}: " if key in lines else ""
        raise ConfigError(f"{where}invalid {key or 'config'}: {exc}") from None


def _key_of(message: str) -> str | None:
    """Config key named by the first word of a validation message."""
    word = re.match(r"[a-z_]*", message).group(0)
    if word == "milestone":
        word = "milestones"
    return word if word in CONFIG_FIELDS else None


def parse_config(path, overrides: dict[str, object] | None = None) -> TrainConfig:
    return build_config(read_config_values(path), overrides, source=str(path))


def dump_config(config: TrainConfig) -> str:
    lines = []
    for name in CONFIG_FIELDS:
        value = getattr(config, name)
        if name == "milestones":
            text = format_milestones(value)
        elif value is None:
            text = "none"
        elif isinstance(value, bool):
            text = "true" if value else "false"
        else:
            text = str(value)
        lines.append(f"{name} = {text}")
    return "\n".join(lines) + "\n"

