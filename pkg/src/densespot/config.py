"""Run configuration: one flat record, serialized as sectioned key=value text.

Every CLI flag maps to a field here; flags override file values. ``None``
serializes as the literal ``none``.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, fields


@dataclass
class RunConfig:
    # paths
    features_dir: str = ""
    labels_file: str = ""
    out_dir: str = "."
    # data
    feature_rate_hz: float = 2.0
    chunk_len_s: float = 32.0
    # model
    trunk: str = "unet"
    base_width: int = 64
    unet_levels: int | None = None
    te_layers: int | None = None
    te_embed: int | None = None
    te_heads: int | None = None
    mlp_width_hidden: int = 256
    mlp_width_out: int = 64
    # targets
    r_c_s: float = 3.0
    r_d_s: float = 6.0
    # optim
    lr: float = 1e-3
    weight_decay: float = 1e-3
    sam_rho: float = 0.05
    mixup_alpha: float = 0.2
    epochs: int = 50
    chunks_per_epoch: int = 1024
    batch_size: int = 32
    checkpoint_every: int = 0
    # postproc
    nms_window_s: float = 20.0
    keep_threshold: float = 0.0
    # infer
    stride_s: float | None = None
    # eval
    preset: str = "both"
    # synth
    num_videos: int = 4
    video_len_s: float = 120.0
    num_classes: int = 3
    rate_per_min: float = 1.0
    bump_width_s: float = 2.0
    noise_sigma: float = 0.3
    feature_dim: int = 16
    # run
    seed: int = 0
    threads: int = 0
    deterministic: bool = False


SECTIONS = {
    "paths": ("features_dir", "labels_file", "out_dir"),
    "data": ("feature_rate_hz", "chunk_len_s"),
    "model": (
        "trunk", "base_width", "unet_levels", "te_layers", "te_embed", "te_heads",
        "mlp_width_hidden", "mlp_width_out",
    ),
    "targets": ("r_c_s", "r_d_s"),
    "optim": (
        "lr", "weight_decay", "sam_rho", "mixup_alpha", "epochs",
        "chunks_per_epoch", "batch_size", "checkpoint_every",
    ),
    "postproc": ("nms_window_s", "keep_threshold"),
    "infer": ("stride_s",),
    "eval": ("preset",),
    "synth": (
        "num_videos", "video_len_s", "num_classes", "rate_per_min",
        "bump_width_s", "noise_sigma", "feature_dim",
    ),
    "run": ("seed", "threads", "deterministic"),
}

_BASE_TYPES = {f.name: f.type for f in fields(RunConfig)}


class ConfigError(ValueError):
    """A run configuration that cannot be parsed or is inconsistent."""


def _parse_value(name: str, raw: str):
    kind = _BASE_TYPES[name]
    raw = raw.strip()
    if raw.lower() == "none":
        if "None" not in kind:
            raise ConfigError(f"{name}: 'none' is not allowed")
        return None
    try:
        if kind.startswith("bool"):
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if kind.startswith("int"):
            return int(raw)
        if kind.startswith("float"):
            return float(raw)
        return raw
    except ValueError as e:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind}") from e


def load_config(path) -> RunConfig:
    parser = configparser.ConfigParser()
    try:
        with open(path, "r", encoding="utf-8") as f:
            parser.read_file(f)
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}") from e
    values = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in SECTIONS[section]:
                raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
            values[key] = _parse_value(key, raw)
    return RunConfig(**values)


def dump_config(config: RunConfig) -> str:
    out = io.StringIO()
    for section, keys in SECTIONS.items():
        out.write(f"[{section}]\n")
        for key in keys:
            value = getattr(config, key)
            out.write(f"{key} = {'none' if value is None else value}\n")
        out.write("\n")
    return out.getvalue()


def save_config(path, config: RunConfig) -> None:
    from .util import atomic_write_text

    atomic_write_text(path, dump_config(config))
