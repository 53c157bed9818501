"""Run configuration: presets, dotted-path overrides, JSON round trip."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict
from pathlib import Path

from .augment import EcgAugmentConfig, ImageAugmentConfig
from .cohort import SynthConfig
from .ecg_mae import EcgModelConfig, MaeConfig
from .engine import ConfigError
from .finetune_eval import FinetuneConfig
from .image_ssl import ImageModelConfig, SimclrConfig
from .mm_align import AlignConfig

STAGES = ("synth-data", "pretrain-ecg", "pretrain-image", "align", "finetune", "evaluate")

_SECTIONS = {
    "data": SynthConfig,
    "ecg_model": EcgModelConfig,
    "mae": MaeConfig,
    "image_model": ImageModelConfig,
    "simclr": SimclrConfig,
    "align": AlignConfig,
    "finetune": FinetuneConfig,
}


def _paper() -> dict:
    """Published hyperparameters at full resolution (10 s ECG at 500 Hz, ResNet-50)."""
    return {
        "name": "paper",
        "seed": 0,
        "task": "mi",
        "init": "align",
        "stages": list(STAGES),
        "upstream": None,
        "split": [0.8, 0.1, 0.1],
        "cohort_path": None,
        "preprocess": {"highpass_hz": 0.5, "highpass_order": 5, "line_freq": 50.0},
        "data": asdict(SynthConfig(n_time=5000, sampling_rate=500.0, image_size=128)),
        "ecg_model": asdict(EcgModelConfig()),
        "mae": asdict(MaeConfig()),
        "image_model": asdict(ImageModelConfig()),
        "simclr": asdict(SimclrConfig()),
        "align": asdict(AlignConfig()),
        "finetune": asdict(FinetuneConfig()),
    }


def _expand_augment(cfg: dict) -> dict:
    """Spell out every augmentation field so each one is addressable by a dotted override."""
    for section, key, cls in (("mae", "augment", EcgAugmentConfig), ("simclr", "augment", ImageAugmentConfig),
                              ("align", "ecg_augment", EcgAugmentConfig),
                              ("align", "image_augment", ImageAugmentConfig)):
        cfg[section][key] = asdict(cls(**cfg[section][key]))
    return cfg


def _desk() -> dict:
    """Laptop-scale variant: 4 s ECG at 125 Hz, 64x64 images, narrow encoders, few epochs."""
    cfg = _paper()
    cfg["name"] = "desk"
    cfg["data"] = asdict(SynthConfig(heart_rate_sd=3.0, beat_jitter_s=0.1))
    cfg["ecg_model"] = asdict(EcgModelConfig(n_time=500, width=192, depth=2, heads=6,
                                             decoder_width=96, decoder_depth=1, decoder_heads=6))
    cfg["mae"] = asdict(MaeConfig(epochs=8, batch_size=64, base_lr=3e-3, weight_decay=0.15,
                                  augment={"crop": False}))
    cfg["image_model"] = asdict(ImageModelConfig(arch="small", widths=(32, 64, 128), blocks=(1, 1, 1),
                                                 proj_hidden=128, proj_out=128))
    cfg["simclr"] = asdict(SimclrConfig(epochs=8, batch_size=128, base_lr=1e-3, warmup_epochs=1))
    # crop-resize scrambles beat timing at 4 s; without it retrieval rank keeps improving
    cfg["align"] = asdict(AlignConfig(epochs=12, batch_size=128, base_lr=3e-4, tab_hidden=192,
                                      tab_out=192, ecg_augment={"crop": False}))
    cfg["finetune"] = asdict(FinetuneConfig(epochs=30, batch_size=64, base_lr=1e-4, tab_hidden=192,
                                            tab_out=192))
    return cfg


PRESETS = {"paper": _paper, "desk": _desk}



def preset(name: str) -> dict:
    try:
        make = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset '{name}', expected one of {sorted(PRESETS)}") from None
    return _expand_augment(make())


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def set_path(cfg: dict, dotted: str, value) -> dict:
    """Set ``a.b.c`` in a nested dict; the path must already exist."""
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        if not isinstance(node, dict) or k not in node:
            raise ConfigError(f"unknown config key '{dotted}'")
        node = node[k]
    if not isinstance(node, dict) or keys[-1] not in node:
        raise ConfigError(f"unknown config key '{dotted}'")
    node[keys[-1]] = value
    return cfg


def apply_overrides(cfg: dict, overrides) -> dict:
    """Apply ``key=value`` strings (values parsed as JSON when possible)."""
    cfg = copy.deepcopy(cfg)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override '{item}' must look like key=value")
        key, text = item.split("=", 1)
        set_path(cfg, key.strip(), _parse_value(text))
    return cfg


def merge(base: dict, update: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in update.items():
        if k not in out:
            raise ConfigError(f"unknown config key '{prefix}{k}'")
        if isinstance(v, dict) and isinstance(out[k], dict):
            out[k] = merge(out[k], v, f"{prefix}{k}.")
        else:
            out[k] = v
    return out


def validate(cfg: dict) -> dict:
    """Instantiate every section once so bad values fail before any training starts."""
    for key, cls in _SECTIONS.items():
        try:
            obj = cls(**cfg[key])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid '{key}' section: {exc}") from None
        if hasattr(obj, "validate"):
            try:
                obj.validate()
            except ValueError as exc:
                raise ConfigError(f"invalid '{key}' section: {exc}") from None
    for stage in cfg["stages"]:
        if stage not in STAGES:
            raise ConfigError(f"unknown stage '{stage}', expected some of {STAGES}")
    if cfg["task"] not in ("mi", "stroke"):
        raise ConfigError(f"unknown task '{cfg['task']}'")
    if cfg["init"] not in ("align", "mae", "scratch"):
        raise ConfigError(f"unknown init '{cfg['init']}'")
    em, dm = cfg["ecg_model"], cfg["data"]
    if (em["n_leads"], em["n_time"]) != (dm["n_leads"], dm["n_time"]):
        raise ConfigError("ecg_model and data disagree on the ECG shape")
    return cfg


def load_config(path=None, base: str = "desk", overrides=()) -> dict:
    """Preset, then the JSON file at ``path`` (if any), then dotted overrides."""
    cfg = preset(base)
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if "preset" in user:
            cfg = preset(user.pop("preset"))
        cfg = merge(cfg, user)
    return validate(apply_overrides(cfg, overrides))
