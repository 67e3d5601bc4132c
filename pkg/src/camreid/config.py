"""Flat ``section.key=value`` run configuration.

A config file is a list of lines like ``loss.lambda_pid=10``; ``#`` starts a comment.
Environment variables named ``CAMREID__SECTION__KEY`` override file values.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .exceptions import ConfigError

ENV_PREFIX = "CAMREID__"


@dataclass
class RunSection:
    name: str = "default"
    seed: int = 0
    runs_root: str = "runs"


@dataclass
class DataSection:
    # empty root -> the synthetic benchmark written by make-data inside the run directory
    root: str = ""
    num_identities: int = 32
    num_test_identities: int = 24
    num_cameras_source: int = 4
    num_cameras_target: int = 4
    images_per_id_per_camera: int = 4
    height: int = 64
    width: int = 32
    min_color_distance: float = 0.25
    pose_jitter: int = 2
    pixel_noise: float = 0.02
    target_hue: float = 10.0
    target_gamma: tuple = (0.85, 1.2)
    background_jitter: float = 0.1
    illumination_jitter: float = 0.1


@dataclass
class LossSection:
    lambda_t: float = 1.0
    lambda_cls: float = 1.0
    lambda_rec: float = 10.0
    lambda_idt: float = 1.0
    lambda_pid: float = 10.0
    lambda_g: float = 1.0
    lambda_up: float = 1.0
    lambda_lower: float = 0.5
    lambda_erase: float = 1.0
    margin_pretrain: float = 0.5
    margin_finetune: float = 0.3
    epsilon: float = 0.1


@dataclass
class PretrainSection:
    widths: tuple = (32, 64, 96, 128)
    pooling: str = "max"
    classifier_pooling: str = "avg"
    epochs: int = 80
    milestones: tuple = (40, 70)
    lr: float = 3.5e-4
    weight_decay: float = 5e-4
    P: int = 16
    K: int = 4
    augment: tuple = ("crop", "flip")


@dataclass
class GanSection:
    g_base: int = 16
    d_base: int = 16
    n_res: int = 3
    d_layers: int = 4
    residual: bool = True
    batch_size: int = 16
    n_critic: int = 5
    iters: int = 5000
    g_lr: float = 1e-4
    d_lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    non_saturating: bool = False
    normalize_pid: bool = True
    checkpoint_every: int = 0


@dataclass
class TransferSection:
    epochs: int = 20
    milestones: tuple = (20,)
    lr: float = 3.5e-4
    # also train on the original source images, one copy per transferred copy (1:1 mix)
    mix_source: bool = False


@dataclass
class CmfcSection:
    epochs: int = 40
    lr: float = 3.5e-4
    weight_decay: float = 5e-4
    P: int = 16
    K: int = 4
    eps_percentile: float = 2.0
    min_pts: int = 4
    erase_area: tuple = (0.1, 0.3)
    normalize_features: bool = True
    pooling: str = "inherit"  # max/avg overrides the checkpoint's descriptor pooling
    branches: str = "both"
    collaborative: bool = True
    share_rng: bool = False
    augment: tuple = ("crop", "flip", "erase")
    eval_model: str = "A"
    checkpoint_every: int = 0


@dataclass
class EvalSection:
    domain: str = "target"
    max_rank: int = 10
    grid_k: int = 5
    grid_queries: int = 8


@dataclass
class TrainConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    loss: LossSection = field(default_factory=LossSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    gan: GanSection = field(default_factory=GanSection)
    transfer: TransferSection = field(default_factory=TransferSection)
    cmfc: CmfcSection = field(default_factory=CmfcSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def set(self, key: str, value: str):
        section, _, name = key.partition(".")
        sec = getattr(self, section, None)
        if sec is None or not dataclasses.is_dataclass(sec) or not name:
            raise ConfigError(f"unknown config section in {key!r}")
        if name not in {f.name for f in fields(sec)}:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            setattr(sec, name, _coerce(getattr(type(sec)(), name), value))
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{key}: cannot parse {value!r} ({e})") from None

    def items(self):
        for f in fields(self):
            sec = getattr(self, f.name)
            for g in fields(sec):
                yield f"{f.name}.{g.name}", getattr(sec, g.name)

    def to_text(self) -> str:
        return "".join(f"{k}={_format(v)}\n" for k, v in self.items())

    def save(self, path):
        Path(path).write_text(self.to_text(), encoding="utf-8")


def _coerce(default: Any, text: str):
    text = text.strip()
    if isinstance(default, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError("expected a boolean")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        items = [t.strip() for t in text.strip("()[]").split(",") if t.strip()]
        proto = default[0] if default else ""
        return tuple(_coerce(proto, t) for t in items)
    return text


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_format(x) for x in v)
    return str(v)


def parse_lines(lines) -> list[tuple[str, str]]:
    out = []
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {raw.strip()!r}")
        k, v = line.split("=", 1)
        out.append((k.strip(), v.strip()))
    return out


def env_overrides(environ=None) -> list[tuple[str, str]]:
    environ = os.environ if environ is None else environ
    out = []
    for k, v in sorted(environ.items()):
        if k.startswith(ENV_PREFIX):
            parts = k[len(ENV_PREFIX):].lower().split("__")
            if len(parts) != 2:
                raise ConfigError(f"{k}: expected {ENV_PREFIX}SECTION__KEY")
            out.append((f"{parts[0]}.{parts[1]}", v))
    return out


def _fix_case(cfg: TrainConfig, key: str) -> str:
    # env var names are upper-cased; map back to the declared field spelling (e.g. P, K)
    section, _, name = key.partition(".")
    sec = getattr(cfg, section, None)
    if dataclasses.is_dataclass(sec):
        for f in fields(sec):
            if f.name.lower() == name:
                return f"{section}.{f.name}"
    return key


def load_config(path=None, overrides=(), environ=None) -> TrainConfig:
    """Defaults, then the file at ``path``, then env vars, then explicit ``overrides``."""
    cfg = TrainConfig()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} does not exist")
        for k, v in parse_lines(p.read_text(encoding="utf-8").splitlines()):
            cfg.set(k, v)
    for k, v in env_overrides(environ):
        cfg.set(_fix_case(cfg, k), v)
    for k, v in overrides:
        cfg.set(k, v)
    return cfg
