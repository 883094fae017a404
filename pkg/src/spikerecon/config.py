"""Run configuration: sectioned key/value files with full validation."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from .dataset import REGION_CODES
from .errors import ValidationError


def _num(lo, hi, cast=float):
    def check(raw: str):
        try:
            v = cast(raw)
        except ValueError:
            raise ValidationError(f"expected a number, got {raw!r}") from None
        if not lo <= v <= hi:
            raise ValidationError(f"value {v} outside [{lo}, {hi}]")
        return v
    return check


def _int(lo, hi):
    return _num(lo, hi, cast=int)


def _float_list(lo, hi):
    inner = _num(lo, hi)
    def check(raw: str):
        return tuple(inner(part.strip()) for part in raw.split(",") if part.strip())
    return check


def _int_list(lo, hi):
    inner = _int(lo, hi)
    def check(raw: str):
        return tuple(inner(part.strip()) for part in raw.split(",") if part.strip())
    return check


# section -> key -> (default, validator)
SCHEMA: dict[str, dict[str, tuple]] = {
    "data": {
        "frames": (600, _int(2, 100000)),
        "height": (32, _int(4, 512)),
        "width": (32, _int(4, 512)),
        "channels": (1, _int(1, 3)),
        "n_classes": (4, _int(2, 6)),
        "frame_period_s": (0.25, _num(1e-3, 60.0)),
        "sessions": (2, _int(1, 64)),
        "units_per_region": (10, _int(1, 1000)),
        "base_rate": (5.0, _num(0.0, 1000.0)),
        "filter_scale": (40.0, _num(0.0, 1e4)),
        "latency_offset_s": (0.03, _num(0.0, 10.0)),
        "info_visp": (0.6, _num(0.0, 1.0)),
        "info_visl": (1.0, _num(0.0, 1.0)),
        "info_vispm": (0.4, _num(0.0, 1.0)),
        "info_visam": (0.3, _num(0.0, 1.0)),
        "info_visal": (0.5, _num(0.0, 1.0)),
        "info_visrl": (0.0, _num(0.0, 1.0)),
    },
    "hvae": {
        "layer_widths": ((8, 16, 32, 64), _int_list(1, 4096)),
        "enc_hidden": (64, _int(1, 4096)),
        "state_dim": (64, _int(1, 4096)),
        "lr": (5e-3, _num(0.0, 1.0)),
        "steps": (4000, _int(1, 10**7)),
        "batch": (16, _int(1, 4096)),
        "k_layers": (3, _int(1, 64)),
    },
    "diffusion": {
        "t_steps": (50, _int(1, 10000)),
        "beta_lo": (1e-4, _num(1e-8, 0.999)),
        "beta_hi": (0.05, _num(1e-8, 0.999)),
        "ae_hidden": (256, _int(1, 8192)),
        "ae_lr": (2e-3, _num(0.0, 1.0)),
        "ae_steps": (6000, _int(1, 10**7)),
        "den_hidden": (128, _int(1, 8192)),
        "den_lr": (2e-3, _num(0.0, 1.0)),
        "den_steps": (4000, _int(1, 10**7)),
        "batch": (32, _int(1, 4096)),
        "strength": (0.75, _num(1e-9, 1.0)),
        "w_vision": (0.6, _num(0.0, 1.0)),
        "w_text": (0.4, _num(0.0, 1.0)),
    },
    "semantic": {
        "feat_dim": (16, _int(1, 4096)),
        "lr": (5e-2, _num(0.0, 10.0)),
        "steps": (3000, _int(1, 10**7)),
        "batch": (32, _int(1, 4096)),
        "min_accuracy": (0.9, _num(0.0, 1.0)),
    },
    "regression": {
        "lambda_grid": ((1e-3, 1e-2, 1e-1, 1.0), _float_list(0.0, 1e9)),
        "cv_folds": (5, _int(2, 100)),
    },
    "run": {
        "seed": (0, _int(0, 2**31 - 1)),
        "test_frac": (0.2, _num(0.01, 0.9)),
    },
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)

    def __getitem__(self, key: tuple[str, str]):
        return self.values[key]

    def get(self, section: str, key: str):
        return self.values[(section, key)]

    def region_information(self) -> dict[str, float]:
        return {r: self.get("data", f"info_{r.lower()}") for r in REGION_CODES}

    def as_manifest_dict(self) -> dict:
        out: dict[str, dict] = {}
        for (sec, key), v in sorted(self.values.items()):
            out.setdefault(sec, {})[key] = list(v) if isinstance(v, tuple) else v
        return out


def default_config() -> RunConfig:
    values = {(sec, key): spec[0] for sec, keys in SCHEMA.items()
              for key, spec in keys.items()}
    return RunConfig(values)


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    """Parse an INI file, apply KEY=VALUE overrides, validate everything."""
    cfg = default_config()
    if path is not None:
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ValidationError(f"config file not found: {path}")
        for sec in parser.sections():
            if sec not in SCHEMA:
                raise ValidationError(f"unknown config section [{sec}]")
            for key, raw in parser.items(sec):
                _apply(cfg, sec, key, raw)
    for ov in overrides or []:
        if "=" not in ov:
            raise ValidationError(f"override must be SECTION.KEY=VALUE: {ov!r}")
        lhs, raw = ov.split("=", 1)
        if "." not in lhs:
            raise ValidationError(f"override must be SECTION.KEY=VALUE: {ov!r}")
        sec, key = lhs.split(".", 1)
        _apply(cfg, sec, key, raw)
    _cross_validate(cfg)
    return cfg


def _apply(cfg: RunConfig, sec: str, key: str, raw: str):
    if sec not in SCHEMA or key not in SCHEMA[sec]:
        raise ValidationError(f"unknown config key [{sec}] {key}")
    _, validator = SCHEMA[sec][key]
    try:
        cfg.values[(sec, key)] = validator(raw)
    except ValidationError as e:
        raise ValidationError(f"[{sec}] {key}: {e}") from None


def _cross_validate(cfg: RunConfig):
    if cfg.get("diffusion", "beta_lo") > cfg.get("diffusion", "beta_hi"):
        raise ValidationError("[diffusion] beta_lo must be <= beta_hi")
    wsum = cfg.get("diffusion", "w_vision") + cfg.get("diffusion", "w_text")
    if abs(wsum - 1.0) > 1e-9:
        raise ValidationError("[diffusion] w_vision + w_text must equal 1")
    widths = cfg.get("hvae", "layer_widths")
    if cfg.get("hvae", "k_layers") > len(widths):
        raise ValidationError("[hvae] k_layers exceeds layer count")
    for side in ("height", "width"):
        if cfg.get("data", side) % 4:
            raise ValidationError(f"[data] {side} must be divisible by 4")


def write_default_config(path):
    lines = []
    for sec, keys in SCHEMA.items():
        lines.append(f"[{sec}]")
        for key, (default, _) in keys.items():
            if isinstance(default, tuple):
                lines.append(f"{key} = {','.join(str(v) for v in default)}")
            else:
                lines.append(f"{key} = {default}")
        lines.append("")
    Path(path).write_text("\n".join(lines))
