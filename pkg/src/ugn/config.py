"""Flat ``key = value`` run configuration with typed validation."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

from .model import EncoderConfig
from .train import TrainConfig
from .uncertainty import UncertaintyConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "out"
    train_dir: str = ""
    val_dir: str = ""
    infer_dir: str = ""
    palette: str = ""
    checkpoint: str = ""
    resume: str = ""
    predictions: str = ""
    absent_as_zero: bool = False
    # synthetic data
    synth_count: int = 16
    synth_val_count: int = 8
    synth_size: int = 64
    synth_classes: int = 4
    synth_unknown_fraction: float = 0.02
    # encoder
    widths: Tuple[int, ...] = (8, 8, 16, 32, 64)
    gate_width: int = 0
    blocks_per_stage: int = 2
    # uncertainty
    samples: int = 10
    gamma_class_mode: str = "winner"
    clamp_fusion_weight: bool = True
    # training
    epochs: int = 30
    crops_per_image: int = 8
    crop_size: int = 64
    lr: float = 0.5
    lr_milestones: Tuple[float, ...] = (0.6, 0.85)
    lr_factors: Tuple[float, ...] = (0.1, 0.01)
    hue_shift: float = 0.05
    contrast_low: float = 0.8
    contrast_high: float = 1.25
    brightness: float = 0.1
    noise_std: float = 0.02
    lambda_unc: float = 1.0
    lambda_ce: float = 1.0
    beta1: float = 0.9
    # self-test
    gradcheck_trials: int = 100

    def __post_init__(self):
        # build the component configs once so their checks run at parse time
        self.encoder_config()
        self.uncertainty_config()
        self.train_config()
        if self.synth_size % 32:
            raise ConfigError(f"synth_size {self.synth_size} must be divisible by 32")
        if not 0 <= self.synth_unknown_fraction < 1:
            raise ConfigError("synth_unknown_fraction must lie in [0, 1)")

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(self.widths, self.blocks_per_stage, 3, self.gate_width)

    def uncertainty_config(self) -> UncertaintyConfig:
        return UncertaintyConfig(self.samples, self.gamma_class_mode, self.clamp_fusion_weight)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            crops_per_image=self.crops_per_image,
            crop_size=self.crop_size,
            lr=self.lr,
            lr_milestones=self.lr_milestones,
            lr_factors=self.lr_factors,
            hue_shift=self.hue_shift,
            contrast=(self.contrast_low, self.contrast_high),
            brightness=self.brightness,
            noise_std=self.noise_std,
            lambda_unc=self.lambda_unc,
            lambda_ce=self.lambda_ce,
            beta1=self.beta1,
            seed=self.seed,
        )

    def path(self, key: str) -> Path:
        """Resolved path setting; empty values fall back to locations under ``output_dir``."""
        out = Path(self.output_dir)
        val = getattr(self, key)
        if val:
            return Path(val)
        if key == "infer_dir":
            return self.path("val_dir")
        defaults = {
            "train_dir": out / "train",
            "val_dir": out / "val",
            "checkpoint": out / "checkpoint.ugn",
            "palette": out / "palette.txt",
            "predictions": out / "infer",
        }
        return defaults[key]

    def dumps(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(repr(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _convert(key: str, raw: str):
    f = _FIELDS[key]
    default = f.default
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        kind = type(default[0])
        return tuple(kind(x) for x in raw.split(",") if x.strip())
    return raw


def parse_lines(lines: Sequence[str], source: str = "<config>") -> dict:
    values = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, val = (p.strip() for p in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            values[key] = _convert(key, val)
        except ValueError as e:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {e}") from None
    return values


def parse_overrides(args: Sequence[str]) -> dict:
    """``--key value`` pairs (``--key=value`` also accepted)."""
    values = {}
    args = list(args)
    i = 0
    while i < len(args):
        tok = args[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        if "=" in tok:
            key, val = tok[2:].split("=", 1)
            i += 1
        else:
            if i + 1 >= len(args):
                raise ConfigError(f"missing value for {tok}")
            key, val = tok[2:], args[i + 1]
            i += 2
        key = key.replace("-", "_")
        if key not in _FIELDS:
            raise ConfigError(f"unknown key {key!r}")
        try:
            values[key] = _convert(key, val)
        except ValueError as e:
            raise ConfigError(f"bad value for {key!r}: {e}") from None
    return values


def parse_config(path: Optional[str] = None, overrides: Sequence[str] = ()) -> RunConfig:
    values = {}
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} not found")
        values.update(parse_lines(p.read_text().splitlines(), str(p)))
    values.update(parse_overrides(overrides))
    try:
        return RunConfig(**values)
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(str(e)) from None


def loads(text: str) -> RunConfig:
    return RunConfig(**parse_lines(text.splitlines()))


def replace(cfg: RunConfig, **changes) -> RunConfig:
    return dataclasses.replace(cfg, **changes)
