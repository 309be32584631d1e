"""Backbone network and its configuration.

The model embeds a clip into a space-time token grid, fuses in the local
convolutional branch, then stacks pre-norm transformer blocks:

    Y = X + MHA(Norm(X))
    W = WEA(Y)            (identity when disabled)
    Z = W + MLP(Norm(W))

Both the local branch and the window attention are pure config toggles;
with both off the network is a vanilla pre-norm ViT over all tokens.
"""

from __future__ import annotations

import dataclasses
import io
from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np

from . import tensor as tt
from .embed import PatchEmbed, add_positional
from .errors import ConfigError, InputError, ParseError
from .lra import LraBranch, LraStageConfig
from .nn import LayerNorm, Mlp, Module, MultiHeadAttention
from .tensor import Tensor
from .wea import FUSIONS, SCHEMES, WindowEnhancedAttention


@dataclass(frozen=True)
class ModelConfig:
    frames: int = 16
    sample_stride: int = 4
    height: int = 224
    width: int = 224
    patch: Tuple[int, int, int] = (2, 16, 16)
    embed_dim: int = 768
    num_blocks: int = 12
    num_heads: int = 12
    mlp_ratio: float = 4.0
    window: int = 7
    scheme: str = "joint"
    fusion: str = "sum"
    use_wea: bool = True
    use_lra: bool = True
    lra_depths: Tuple[int, ...] = (5, 8)
    lra_channels: Tuple[int, ...] = (320, 768)
    lra_stem: Tuple[int, int, int] = (2, 4, 4)
    lra_inter: Tuple[int, int, int] = (1, 4, 4)
    num_classes: int = 15
    drop_path: float = 0.0  # reserved hook; only 0.0 is implemented

    @property
    def grid(self) -> Tuple[int, int, int]:
        pt, ph, pw = self.patch
        return (self.frames // pt, self.height // ph, self.width // pw)

    @property
    def mlp_hidden(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)

    def validate(self) -> "ModelConfig":
        pt, ph, pw = self.patch
        if self.frames < 2 or self.frames % pt or self.height % ph or self.width % pw:
            raise ConfigError(
                f"input {self.frames}x{self.height}x{self.width} not divisible "
                f"by patch {self.patch}")
        if self.sample_stride < 1:
            raise ConfigError("sample_stride must be >= 1")
        if self.embed_dim % self.num_heads:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by {self.num_heads} heads")
        if self.num_blocks < 0 or self.num_classes < 1 or self.mlp_ratio <= 0:
            raise ConfigError("num_blocks >= 0, num_classes >= 1, mlp_ratio > 0 required")
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown scheme {self.scheme!r}")
        if self.fusion not in FUSIONS:
            raise ConfigError(f"unknown fusion {self.fusion!r}")
        _, gh, gw = self.grid
        if self.use_wea and not (1 <= self.window <= min(gh, gw)):
            raise ConfigError(f"window {self.window} outside [1, {min(gh, gw)}]")
        if self.use_lra:
            total = tuple(a * b for a, b in zip(self.lra_stem, self.lra_inter))
            if total != self.patch:
                raise ConfigError(
                    f"branch strides {self.lra_stem}*{self.lra_inter} do not "
                    f"reach the patch grid {self.patch}")
            if self.lra_channels[-1] != self.embed_dim:
                raise ConfigError(
                    f"final branch channels {self.lra_channels[-1]} != embed_dim")
        if self.drop_path != 0.0:
            raise ConfigError("drop_path is a reserved hook; only 0.0 is implemented")
        return self

    def lra_config(self) -> LraStageConfig:
        return LraStageConfig(self.lra_depths, self.lra_channels,
                              self.lra_stem, self.lra_inter)

    def to_lines(self):
        out = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(i) for i in v)
            out.append(f"{f.name}={v}")
        return out

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw).validate()


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(ModelConfig)}


def _parse_value(name: str, raw: str):
    kind = _FIELD_TYPES[name]
    raw = raw.strip()
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind == "str":
        return raw
    if kind == "bool":
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"bad boolean {raw!r} for {name}")
    return tuple(int(p) for p in raw.split(","))


def config_from_lines(lines, base: ModelConfig = None) -> ModelConfig:
    kw = {}
    for i, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError("expected key=value", line=i)
        key, _, raw = line.partition("=")
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            kw[key] = _parse_value(key, raw)
        except ValueError as e:
            raise ParseError(f"bad value for {key}: {e}", line=i) from None
    base = base or ModelConfig()
    return dataclasses.replace(base, **kw).validate()


PRESETS: Dict[str, ModelConfig] = {
    "full": ModelConfig(),
    "tiny": ModelConfig(
        frames=8, sample_stride=2, height=32, width=32, patch=(2, 8, 8),
        embed_dim=32, num_blocks=4, num_heads=4, window=3,
        lra_depths=(1, 1), lra_channels=(16, 32),
        lra_stem=(2, 4, 4), lra_inter=(1, 2, 2), num_classes=4),
}


def resolve_config(spec: str) -> ModelConfig:
    """Accept a preset name or a key=value file path."""
    if spec in PRESETS:
        return PRESETS[spec].validate()
    try:
        with open(spec) as f:
            lines = f.readlines()
    except OSError as e:
        raise ConfigError(f"config {spec!r} is neither a preset "
                          f"({', '.join(PRESETS)}) nor a readable file: {e}") from None
    return config_from_lines(lines)


class Block(Module):
    """One pre-norm transformer block, optionally window-enhanced."""

    def __init__(self, cfg: ModelConfig, rng, dtype=np.float32):
        c = cfg.embed_dim
        self.norm1 = LayerNorm(c, dtype=dtype)
        self.attn = MultiHeadAttention(c, cfg.num_heads, rng, dtype)
        self.wea = (WindowEnhancedAttention(c, cfg.num_heads, cfg.window, rng,
                                            cfg.scheme, cfg.fusion, dtype)
                    if cfg.use_wea else None)
        self.norm2 = LayerNorm(c, dtype=dtype)
        self.mlp = Mlp(c, cfg.mlp_hidden, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        n, tp, gh, gw, c = x.shape
        seq = x.reshape(n, tp * gh * gw, c)
        y = (seq + self.attn(self.norm1(seq))).reshape(n, tp, gh, gw, c)
        if self.wea is not None:
            y = self.wea(y)
        return y + self.mlp(self.norm2(y))


class VideoModel(Module):
    """Patch embedding + positional encoding + local branch + blocks."""

    def __init__(self, cfg: ModelConfig, rng, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.patch_embed = PatchEmbed(cfg.patch, cfg.embed_dim, rng, dtype=dtype)
        self.lra = (LraBranch(cfg.lra_config(), rng, mlp_ratio=int(cfg.mlp_ratio),
                              dtype=dtype) if cfg.use_lra else None)
        self.blocks = [Block(cfg, rng, dtype) for _ in range(cfg.num_blocks)]

    def tokens(self, clip: Tensor) -> Tensor:
        x = add_positional(self.patch_embed(clip))
        if self.lra is not None:
            x = x + self.lra(clip, grid=x.shape[1:4])
        return x

    def forward_tokens(self, x: Tensor) -> Tensor:
        for blk in self.blocks:
            x = blk(x)
        return x

    def __call__(self, clip: Tensor) -> Tensor:
        return self.forward_tokens(self.tokens(clip))


def count_params_flops(cfg: ModelConfig) -> Dict[str, int]:
    """Closed-form parameter count plus a coarse FLOP estimate.

    Parameters cover the backbone and the box classifier, matching the
    tensors a checkpoint stores. FLOPs count multiply-accumulates times
    two for convolutions, linears, and attention matmuls on one clip;
    norms, poolings, and per-box head work are ignored.
    """
    cfg.validate()
    c, r = cfg.embed_dim, cfg.mlp_hidden
    tp, gh, gw = cfg.grid
    seq = tp * gh * gw

    def mha_params(dim):
        return 4 * (dim * dim + dim)

    params = c * 3 * int(np.prod(cfg.patch)) + c  # patch embedding
    flops = 2 * seq * 3 * int(np.prod(cfg.patch)) * c

    per_block = 2 * c + mha_params(c) + 2 * c + (c * r + r) + (r * c + c)
    per_block_flops = 8 * seq * c * c + 4 * seq * seq * c + 4 * seq * r * c
    if cfg.use_wea:
        per_block += mha_params(c)
        lw = tp * cfg.window * cfg.window
        proj = 8 * lw * c * c
        sp = 4 * tp * (cfg.window ** 4) * c
        tm = 4 * (cfg.window ** 2) * tp * tp * c
        per_block_flops += {
            "joint": proj + 4 * lw * lw * c,
            "space_only": proj + sp,
            "time_only": proj + tm,
            "divided": 2 * proj + sp + tm,
        }[cfg.scheme]
    params += cfg.num_blocks * per_block
    flops += cfg.num_blocks * per_block_flops

    if cfg.use_lra:
        c1, c2 = cfg.lra_channels
        p1 = (cfg.frames // cfg.lra_stem[0]) * (cfg.height // cfg.lra_stem[1]) \
            * (cfg.width // cfg.lra_stem[2])
        p2 = seq
        params += c1 * 3 * int(np.prod(cfg.lra_stem)) + c1
        flops += 2 * p1 * 3 * int(np.prod(cfg.lra_stem)) * c1
        params += c2 * c1 * int(np.prod(cfg.lra_inter)) + c2
        flops += 2 * p2 * c1 * int(np.prod(cfg.lra_inter)) * c2
        for depth, ch, pos in ((cfg.lra_depths[0], c1, p1), (cfg.lra_depths[1], c2, p2)):
            m = int(cfg.mlp_ratio)
            blk = (27 * ch + ch) + 2 * ch + (2 * (ch * ch + ch) + 125 * ch + ch) \
                + 2 * ch + (ch * m * ch + m * ch) + (m * ch * ch + ch)
            blk_flops = 2 * pos * ch * (27 + 125 + 2 * ch + 2 * m * ch)
            params += depth * blk
            flops += depth * blk_flops

    params += c * cfg.num_classes + cfg.num_classes  # box classifier
    return {"params": int(params), "flops": int(flops)}


CKPT_MAGIC = b"WVC1\n"


def save_checkpoint(path, cfg: ModelConfig, module: Module) -> None:
    """Text manifest (config, tensor names) followed by binary tensors."""
    named = module.named_params()
    header = ["[config]"] + cfg.to_lines() + ["[tensors]"] + [n for n, _ in named] \
        + ["[data]"]
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(("\n".join(header) + "\n").encode())
        for _, p in named:
            tt.write_tensor(f, p.data)


def load_checkpoint(path):
    """Return (config, {name: array}) from a checkpoint file."""
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(CKPT_MAGIC):
        raise ParseError(f"bad checkpoint magic in {path}")
    marker = b"[data]\n"
    cut = blob.find(marker)
    if cut < 0:
        raise ParseError(f"checkpoint {path} has no data section")
    lines = blob[len(CKPT_MAGIC):cut].decode().splitlines()
    try:
        t_at = lines.index("[tensors]")
    except ValueError:
        raise ParseError(f"checkpoint {path} has no tensor list") from None
    if not lines or lines[0] != "[config]":
        raise ParseError(f"checkpoint {path} has no config section")
    cfg = config_from_lines(lines[1:t_at])
    names = [ln for ln in lines[t_at + 1 :] if ln]
    stream = io.BytesIO(blob[cut + len(marker):])
    state = {name: tt.read_tensor(stream) for name in names}
    return cfg, state


def restore_params(module: Module, state: Dict[str, np.ndarray]) -> None:
    named = dict(module.named_params())
    if set(named) != set(state):
        missing = sorted(set(named) - set(state))
        extra = sorted(set(state) - set(named))
        raise InputError(f"checkpoint mismatch; missing {missing}, extra {extra}")
    for name, arr in state.items():
        p = named[name]
        if p.data.shape != arr.shape:
            raise InputError(
                f"shape mismatch for {name}: {p.data.shape} vs {arr.shape}")
        p.data = arr.astype(p.data.dtype, copy=True)
