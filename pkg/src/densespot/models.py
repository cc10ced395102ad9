"""Model definition: per-timestep MLP, two trunks, and the prediction heads.

The model maps a ``[T x P]`` feature chunk to dense per-anchor outputs:
confidence logits and temporal displacements, each ``[T x K]``. Both trunks
preserve the temporal length. The u-net trunk uses pre-activation residual
bottleneck blocks with no normalization layers; the Transformer trunk uses
pre-norm encoder blocks with fixed sinusoidal positional encoding and full
bidirectional attention.

Checkpoints are a flat binary container of named float32 tensors (bit-exact
round trip), with a plain-text ``key=value`` manifest alongside.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .util import atomic_write_bytes

CHECKPOINT_MAGIC = 0x4450434B
CHECKPOINT_VERSION = 1

TE_PRESETS = {
    "te_small": (4, 128, 4),  # layers, embedding size, attention heads
    "te_base": (12, 256, 8),
}

TRUNK_KINDS = ("unet", "te_small", "te_base", "te")


def default_unet_levels(num_anchors: int) -> int:
    """Deepest level count (capped at 5) keeping the bottom length >= 7."""
    levels = 0
    while (
        levels < 5
        and num_anchors % (2 ** (levels + 1)) == 0
        and num_anchors // (2 ** (levels + 1)) >= 7
    ):
        levels += 1
    if levels == 0:
        raise ValueError(f"no valid u-net depth for chunk length {num_anchors}; pass unet_levels explicitly")
    return levels


@dataclass
class ModelConfig:
    num_classes: int
    num_anchors: int
    feature_dim: int
    trunk: str = "unet"
    mlp_widths: tuple[int, int] = (256, 64)
    base_width: int = 64
    unet_levels: int | None = None
    te_layers: int | None = None
    te_embed: int | None = None
    te_heads: int | None = None
    use_positional_encoding: bool = True

    def __post_init__(self):
        if self.trunk not in TRUNK_KINDS:
            raise ValueError(f"unknown trunk {self.trunk!r}; expected one of {TRUNK_KINDS}")
        if self.num_classes < 1 or self.num_anchors < 1 or self.feature_dim < 1:
            raise ValueError("num_classes, num_anchors and feature_dim must be >= 1")
        self.mlp_widths = tuple(int(w) for w in self.mlp_widths)
        if len(self.mlp_widths) != 2:
            raise ValueError("mlp_widths must be a pair")
        if self.trunk == "unet":
            if self.unet_levels is None:
                self.unet_levels = default_unet_levels(self.num_anchors)
            if self.num_anchors % (2**self.unet_levels) != 0:
                raise ValueError(
                    f"chunk length {self.num_anchors} not divisible by 2^{self.unet_levels}"
                )
        else:
            if self.trunk in TE_PRESETS:
                layers, embed, heads = TE_PRESETS[self.trunk]
                self.te_layers = layers
                self.te_embed = embed
                self.te_heads = heads
            if None in (self.te_layers, self.te_embed, self.te_heads):
                raise ValueError("trunk 'te' needs explicit te_layers, te_embed and te_heads")
            if self.te_embed % self.te_heads != 0:
                raise ValueError(f"embedding size {self.te_embed} not divisible by {self.te_heads} heads")
            if self.te_embed % 2 != 0:
                raise ValueError("embedding size must be even for sinusoidal positions")

    @property
    def trunk_width(self) -> int:
        """Channel width the heads consume."""
        return self.base_width if self.trunk == "unet" else int(self.te_embed)


class ForwardOutput(NamedTuple):
    conf_logits: torch.Tensor
    disp: torch.Tensor


def _mark(module, gain=1.0, zero=False):
    """Tag a layer with its init scheme (read by ``init_parameters``).

    ``gain=2.0`` for layers whose input passed through a ReLU (He scaling),
    ``gain=1.0`` otherwise; ``zero=True`` starts the layer at zero.
    """
    module.init_gain = gain
    module.init_zero = zero
    return module


class PointwiseMLP(nn.Module):
    """Two affine+ReLU layers applied independently at every timestep."""

    def __init__(self, in_dim: int, widths: tuple[int, int]):
        super().__init__()
        self.fc1 = _mark(nn.Linear(in_dim, widths[0]))
        self.fc2 = _mark(nn.Linear(widths[0], widths[1]), gain=2.0)

    def forward(self, x):  # [B, T, P] -> [B, T, widths[1]]
        return F.relu(self.fc2(F.relu(self.fc1(x))))


class BottleneckBlock(nn.Module):
    """Pre-activation residual bottleneck (1x1 reduce, k3 conv, 1x1 expand).

    No normalization; the ReLU-before-conv ordering is kept. A 1x1 projection
    carries the skip path when the channel counts differ.
    """

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        mid = max(out_ch // 4, 1)
        self.reduce = _mark(nn.Conv1d(in_ch, mid, 1), gain=2.0)
        self.conv = _mark(nn.Conv1d(mid, mid, 3, padding=1), gain=2.0)
        # residual branch starts at zero: without normalization, summed
        # He-scaled branches double the variance per block and saturate the
        # heads; identity-at-init keeps activations bounded (standard
        # norm-free residual practice)
        self.expand = _mark(nn.Conv1d(mid, out_ch, 1), zero=True)
        self.project = _mark(nn.Conv1d(in_ch, out_ch, 1)) if in_ch != out_ch else None

    def forward(self, x):  # [B, C, T]
        r = self.expand(F.relu(self.conv(F.relu(self.reduce(F.relu(x))))))
        skip = x if self.project is None else self.project(x)
        return skip + r


class UNetTrunk(nn.Module):
    """1-D u-net: halve time / double channels on the way down, mirror back up.

    Downsampling is a stride-2 convolution; upsampling is nearest-neighbor
    followed by a convolution, with same-resolution encoder features joined by
    channel concatenation.
    """

    def __init__(self, width: int, levels: int):
        super().__init__()
        self.levels = levels
        widths = [width * 2**i for i in range(levels + 1)]
        self.enc_blocks = nn.ModuleList(BottleneckBlock(w, w) for w in widths[:-1])
        self.down = nn.ModuleList(
            _mark(nn.Conv1d(w, 2 * w, 3, stride=2, padding=1)) for w in widths[:-1]
        )
        self.bottom = BottleneckBlock(widths[-1], widths[-1])
        self.up = nn.ModuleList(
            _mark(nn.Conv1d(2 * w, w, 3, padding=1)) for w in reversed(widths[:-1])
        )
        self.dec_blocks = nn.ModuleList(
            BottleneckBlock(2 * w, w) for w in reversed(widths[:-1])
        )

    def forward(self, h):  # [B, T, width] -> [B, T, width]
        x = h.transpose(1, 2)
        if x.shape[-1] % (2**self.levels) != 0:
            raise ValueError(f"temporal length {x.shape[-1]} not divisible by 2^{self.levels}")
        skips = []
        for block, down in zip(self.enc_blocks, self.down):
            x = block(x)
            skips.append(x)
            x = down(x)
        x = self.bottom(x)
        for up, block, skip in zip(self.up, self.dec_blocks, reversed(skips)):
            x = up(F.interpolate(x, scale_factor=2, mode="nearest"))
            x = block(torch.cat([skip, x], dim=1))
        return x.transpose(1, 2)


def sinusoidal_positions(length: int, embed: int, dtype, device) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64, device=device)[:, None]
    freq = torch.pow(
        torch.tensor(10000.0, dtype=torch.float64, device=device),
        -torch.arange(0, embed, 2, dtype=torch.float64, device=device) / embed,
    )
    angles = pos * freq[None, :]
    pe = torch.empty(length, embed, dtype=torch.float64, device=device)
    pe[:, 0::2] = torch.sin(angles)
    pe[:, 1::2] = torch.cos(angles)
    return pe.to(dtype)


class SelfAttention(nn.Module):
    """Multi-head bidirectional self-attention (no mask)."""

    def __init__(self, embed: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = embed // heads
        self.wq = _mark(nn.Linear(embed, embed))
        self.wk = _mark(nn.Linear(embed, embed))
        self.wv = _mark(nn.Linear(embed, embed))
        self.wo = _mark(nn.Linear(embed, embed))

    def forward(self, x, return_attention=False):  # [B, T, E]
        b, t, e = x.shape
        def split(z):
            return z.view(b, t, self.heads, self.head_dim).transpose(1, 2)  # [B, h, T, d]
        q, k, v = split(self.wq(x)), split(self.wk(x)), split(self.wv(x))
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.head_dim), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, t, e)
        out = self.wo(out)
        return (out, attn) if return_attention else out


class EncoderBlock(nn.Module):
    """Pre-norm Transformer block: LN->attention and LN->feed-forward residuals."""

    def __init__(self, embed: int, heads: int):
        super().__init__()
        self.attn_norm = nn.LayerNorm(embed)
        self.attn = SelfAttention(embed, heads)
        self.ff_norm = nn.LayerNorm(embed)
        self.ff1 = _mark(nn.Linear(embed, 4 * embed))
        self.ff2 = _mark(nn.Linear(4 * embed, embed), gain=2.0)

    def forward(self, x):
        x = x + self.attn(self.attn_norm(x))
        return x + self.ff2(F.relu(self.ff1(self.ff_norm(x))))


class TransformerTrunk(nn.Module):
    """Projection to the embedding size, sinusoidal positions, encoder stack."""

    def __init__(self, in_width: int, layers: int, embed: int, heads: int, use_positional_encoding=True):
        super().__init__()
        self.use_positional_encoding = use_positional_encoding
        self.embed = embed
        self.input_proj = _mark(nn.Linear(in_width, embed), gain=2.0)
        self.blocks = nn.ModuleList(EncoderBlock(embed, heads) for _ in range(layers))
        self.final_norm = nn.LayerNorm(embed)

    def forward(self, h):  # [B, T, in_width] -> [B, T, embed]
        x = self.input_proj(h)
        if self.use_positional_encoding:
            x = x + sinusoidal_positions(x.shape[1], self.embed, x.dtype, x.device)
        for block in self.blocks:
            x = block(x)
        return self.final_norm(x)

    def attention_maps(self, h):
        """Per-layer attention probabilities, for inspection."""
        x = self.input_proj(h)
        if self.use_positional_encoding:
            x = x + sinusoidal_positions(x.shape[1], self.embed, x.dtype, x.device)
        maps = []
        for block in self.blocks:
            out, attn = block.attn(block.attn_norm(x), return_attention=True)
            maps.append(attn)
            x = x + out
            x = x + block.ff2(F.relu(block.ff1(block.ff_norm(x))))
        return maps


class PredictionHeads(nn.Module):
    """Two independent kernel-3 convolutions: confidence logits, displacements."""

    def __init__(self, in_width: int, num_classes: int):
        super().__init__()
        self.conf = _mark(nn.Conv1d(in_width, num_classes, 3, padding=1))
        self.disp = _mark(nn.Conv1d(in_width, num_classes, 3, padding=1))

    def forward(self, trunk_out):  # [B, T, W] -> two [B, T, K]
        x = trunk_out.transpose(1, 2)
        return ForwardOutput(self.conf(x).transpose(1, 2), self.disp(x).transpose(1, 2))


class SpottingModel(nn.Module):
    """MLP -> trunk -> heads; accepts [T x P] or [B x T x P] input."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.mlp = PointwiseMLP(config.feature_dim, config.mlp_widths)
        if config.trunk == "unet":
            self.trunk = UNetTrunk(config.base_width, config.unet_levels)
            if config.mlp_widths[1] != config.base_width:
                raise ValueError("u-net width must match the MLP output width")
        else:
            self.trunk = TransformerTrunk(
                config.mlp_widths[1],
                config.te_layers,
                config.te_embed,
                config.te_heads,
                config.use_positional_encoding,
            )
        self.heads = PredictionHeads(config.trunk_width, config.num_classes)

    def forward(self, x) -> ForwardOutput:
        single = x.dim() == 2
        if single:
            x = x[None]
        out = self.heads(self.trunk(self.mlp(x)))
        if single:
            out = ForwardOutput(out.conf_logits[0], out.disp[0])
        return out

    @classmethod
    def build(cls, config: ModelConfig, seed: int = 0) -> "SpottingModel":
        model = cls(config)
        init_parameters(model, seed)
        return model


CONF_BIAS_INIT = -2.0  # sparse detections at initialization


def init_parameters(model: SpottingModel, seed: int) -> None:
    """Deterministic init: fan-in-scaled normal weights, zero biases.

    Layers tagged with ``init_gain=2.0`` (ReLU-fed) use He scaling, the rest
    plain fan-in scaling; residual branch outputs tagged ``init_zero`` start
    at zero. LayerNorm gains start at 1; the confidence head bias starts at
    ``CONF_BIAS_INIT`` so the initial detector is sparse.
    """
    gen = torch.Generator().manual_seed(int(seed))
    for module in model.modules():
        if isinstance(module, (nn.Linear, nn.Conv1d)):
            fan_in = module.weight.shape[1]
            if module.weight.dim() == 3:
                fan_in *= module.weight.shape[2]
            gain = getattr(module, "init_gain", 1.0)
            with torch.no_grad():
                if getattr(module, "init_zero", False):
                    module.weight.zero_()
                else:
                    module.weight.normal_(0.0, math.sqrt(gain / fan_in), generator=gen)
                if module.bias is not None:
                    module.bias.zero_()
        elif isinstance(module, nn.LayerNorm):
            with torch.no_grad():
                module.weight.fill_(1.0)
                module.bias.zero_()
    if isinstance(model, SpottingModel):
        with torch.no_grad():
            model.heads.conf.bias.fill_(CONF_BIAS_INIT)


def state_arrays(model: nn.Module) -> dict[str, np.ndarray]:
    """Named float32 copies of every parameter, in state-dict order."""
    return {
        name: np.ascontiguousarray(p.detach().cpu().numpy(), dtype=np.float32)
        for name, p in model.state_dict().items()
    }


def save_checkpoint(path, arrays: dict[str, np.ndarray]) -> None:
    """Write named tensors: header (magic, version, count), then per-tensor
    records (name length, name bytes, rank, dims, float32 data), all
    little-endian."""
    parts = [struct.pack("<QQQ", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<Q", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<Q", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
        parts.append(arr.tobytes())
    atomic_write_bytes(path, b"".join(parts))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        raw = f.read()
    off = 0

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        vals = struct.unpack_from(fmt, raw, off)
        off += size
        return vals

    magic, version, count = take("<QQQ")
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic 0x{magic:08X}")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = take("<Q")
        name = raw[off : off + name_len].decode("utf-8")
        off += name_len
        (rank,) = take("<Q")
        dims = take(f"<{rank}Q") if rank else ()
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(dims)
        off += 4 * n
        arrays[name] = arr.copy()
    if off != len(raw):
        raise ValueError(f"{path}: {len(raw) - off} trailing bytes")
    return arrays


def load_state_into(model: nn.Module, arrays: dict[str, np.ndarray]) -> None:
    state = {name: torch.from_numpy(np.ascontiguousarray(arr)) for name, arr in arrays.items()}
    model.load_state_dict(state, strict=True)


def write_manifest(path, entries: dict) -> None:
    lines = [f"{key}={entries[key]}" for key in sorted(entries)]
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))


def read_manifest(path) -> dict[str, str]:
    entries: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            key, _, value = line.partition("=")
            entries[key] = value
    return entries


def config_to_manifest(config: ModelConfig) -> dict[str, str]:
    return {
        "trunk": config.trunk,
        "num_classes": str(config.num_classes),
        "num_anchors": str(config.num_anchors),
        "feature_dim": str(config.feature_dim),
        "mlp_widths": ",".join(str(w) for w in config.mlp_widths),
        "base_width": str(config.base_width),
        "unet_levels": str(config.unet_levels),
        "te_layers": str(config.te_layers),
        "te_embed": str(config.te_embed),
        "te_heads": str(config.te_heads),
        "use_positional_encoding": str(config.use_positional_encoding),
    }


def config_from_manifest(entries: dict[str, str]) -> ModelConfig:
    def opt_int(key):
        value = entries.get(key, "None")
        return None if value == "None" else int(value)

    return ModelConfig(
        trunk=entries["trunk"],
        num_classes=int(entries["num_classes"]),
        num_anchors=int(entries["num_anchors"]),
        feature_dim=int(entries["feature_dim"]),
        mlp_widths=tuple(int(w) for w in entries["mlp_widths"].split(",")),
        base_width=int(entries["base_width"]),
        unet_levels=opt_int("unet_levels"),
        te_layers=opt_int("te_layers"),
        te_embed=opt_int("te_embed"),
        te_heads=opt_int("te_heads"),
        use_positional_encoding=entries.get("use_positional_encoding", "True") == "True",
    )
