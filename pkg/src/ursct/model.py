"""U-Net of reinforced Swin-Convs transformer blocks for underwater image enhancement.

Layout (``C`` = embed dim, ``P`` = patch size)::

    image (B,3,H,W)
      -> patch embed                 (B, H/P,  W/P,  C)
      -> [RSCT layer -> downsample] x3, keeping each layer output as a skip
      -> bottleneck RSCT layer       (B, H/8P, W/8P, 8C)
      -> upsample
      -> [skip fuse -> RSCT layer -> upsample] x3   (last upsample: factor P)
      -> 3x3 conv to RGB             (B,3,H,W)

Feature maps between blocks are channels-last ``(B, h, w, c)``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Union

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .nn import Conv2d, LayerNorm, Linear, Module, _param, trunc_normal
from .tensor import Tensor

VARIANTS = ("origin", "conv_type1", "conv_type2")
MASK_VALUE = -1e9
NUM_STAGES = 3


@dataclass
class ModelConfig:
    image_size: tuple[int, int] = (256, 256)
    patch_size: int = 2
    embed_dim: int = 32
    window_size: int = 8
    layer_depth: int = 8
    num_heads: int = 8
    mlp_ratio: float = 4.0
    skip_drop_ratio: float = 0.1
    # "sqrt_dim" divides logits by sqrt(block channels); "sqrt_head_dim" by
    # sqrt(channels per head); a number is used as the divisor directly.
    attn_scale: Union[str, float] = "sqrt_dim"
    variant: str = "conv_type1"
    # "all" masks every shifted block; "decoder" masks only decoder blocks.
    mask_scope: str = "all"
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        self.image_size = tuple(int(s) for s in self.image_size)
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.layer_depth < 2 or self.layer_depth % 2:
            raise ConfigError(f"layer_depth must be a positive even number, got {self.layer_depth}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.mask_scope not in ("all", "decoder"):
            raise ConfigError(f"mask_scope must be 'all' or 'decoder', got {self.mask_scope!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if not 0.0 <= self.skip_drop_ratio <= 1.0:
            raise ConfigError("skip_drop_ratio must lie in [0, 1]")
        if isinstance(self.attn_scale, str):
            if self.attn_scale not in ("sqrt_dim", "sqrt_head_dim"):
                try:
                    self.attn_scale = float(self.attn_scale)
                except ValueError:
                    raise ConfigError(f"bad attn_scale {self.attn_scale!r}") from None
        if not isinstance(self.attn_scale, str) and self.attn_scale <= 0:
            raise ConfigError("attn_scale must be positive")
        check_image_size(*self.image_size, self.patch_size, self.window_size)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(**d)


def check_image_size(h: int, w: int, patch_size: int, window_size: int) -> None:
    """Raise ConfigError unless H/(8P) and W/(8P) are positive multiples of the window size."""
    unit = patch_size * (2**NUM_STAGES) * window_size
    if h <= 0 or w <= 0 or h % unit or w % unit:
        raise ConfigError(
            f"image size {h}x{w} must be a positive multiple of {unit} "
            f"(patch {patch_size} x 2^{NUM_STAGES} x window {window_size})"
        )


# ---------------------------------------------------------------------------
# window machinery


def window_partition(z: Tensor, window_size: int) -> Tensor:
    """(B, h, w, C) -> (B*N, T*T, C), windows in row-major order per image."""
    b, h, w, c = z.shape
    t = window_size
    if h % t or w % t:
        raise DimensionError(f"feature map {h}x{w} not divisible by window size {t}")
    y = z.reshape(b, h // t, t, w // t, t, c).permute(0, 1, 3, 2, 4, 5)
    return y.reshape(b * (h // t) * (w // t), t * t, c)


def window_merge(y: Tensor, h: int, w: int, window_size: int) -> Tensor:
    """Exact inverse of :func:`window_partition`."""
    t = window_size
    if h % t or w % t:
        raise DimensionError(f"feature map {h}x{w} not divisible by window size {t}")
    n = (h // t) * (w // t)
    nw, tt, c = y.shape
    if tt != t * t or nw % n:
        raise DimensionError(f"{y.shape} windows inconsistent with {h}x{w} map and window {t}")
    z = y.reshape(nw // n, h // t, w // t, t, t, c).permute(0, 1, 3, 2, 4, 5)
    return z.reshape(nw // n, h, w, c)


def cyclic_shift(z: Tensor, shift: int) -> Tensor:
    """Roll rows and columns of (B, h, w, C) by ``-shift``; ``cyclic_shift(z, -s)`` undoes it."""
    if shift == 0:
        return z
    return T.roll(z, (-shift, -shift), (1, 2))


def region_ids(h: int, w: int, window_size: int, shift: int) -> np.ndarray:
    """Label each position of the shifted map by the pre-shift region it came from."""
    ids = np.zeros((h, w), dtype=np.int64)
    bands = ((0, h - window_size), (h - window_size, h - shift), (h - shift, h))
    cols = ((0, w - window_size), (w - window_size, w - shift), (w - shift, w))
    label = 0
    for r0, r1 in bands:
        for c0, c1 in cols:
            ids[r0:r1, c0:c1] = label
            label += 1
    return ids


def build_attn_mask(h: int, w: int, window_size: int, shift: int) -> np.ndarray:
    """Additive (N, T*T, T*T) mask: 0 within a region, MASK_VALUE across regions."""
    t = window_size
    n = (h // t) * (w // t)
    if shift == 0:
        return np.zeros((n, t * t, t * t))
    if not 0 < shift < t:
        raise ConfigError(f"shift must satisfy 0 < s < window size, got {shift}")
    ids = region_ids(h, w, t, shift)
    win = ids.reshape(h // t, t, w // t, t).transpose(0, 2, 1, 3).reshape(n, t * t)
    differ = win[:, :, None] != win[:, None, :]
    return np.where(differ, MASK_VALUE, 0.0)


def relative_position_index(window_size: int) -> np.ndarray:
    """(T*T, T*T) index into the ((2T-1)^2, U) bias table."""
    t = window_size
    rows, cols = np.meshgrid(np.arange(t), np.arange(t), indexing="ij")
    coords = np.stack([rows.ravel(), cols.ravel()])
    rel = coords[:, :, None] - coords[:, None, :]
    return (rel[0] + t - 1) * (2 * t - 1) + (rel[1] + t - 1)


def relative_position_bias(table: Tensor, window_size: int) -> Tensor:
    """Expand a ((2T-1)^2, U) table into the (U, T*T, T*T) attention bias."""
    t = window_size
    if table.shape[0] != (2 * t - 1) ** 2:
        raise DimensionError(f"bias table needs {(2 * t - 1) ** 2} rows, got {table.shape[0]}")
    idx = relative_position_index(t).reshape(-1)
    b = table[idx].reshape(t * t, t * t, table.shape[1])
    return b.permute(2, 0, 1)


# ---------------------------------------------------------------------------
# attention


def _to_spatial(y: Tensor, t: int) -> Tensor:
    nw, _, c = y.shape
    return y.reshape(nw, t, t, c).permute(0, 3, 1, 2)


def _from_spatial(x: Tensor) -> Tensor:
    nw, c, t, _ = x.shape
    return x.permute(0, 2, 3, 1).reshape(nw, t * t, c)


class WindowAttention(Module):
    """Windowed multi-head self-attention with relative position bias.

    ``variant`` selects how Q, K, V are produced:

    * ``origin``: one linear layer C -> 3C.
    * ``conv_type1``: 1x1 conv C -> 3C, then 3x3 depthwise conv over the 3C
      channels of each T x T window.
    * ``conv_type2``: linear C -> 3C, plus a 3x3 depthwise conv over V whose
      output is added to the attention result before the output projection.
    """

    def __init__(self, dim: int, num_heads: int, window_size: int, variant: str, attn_scale, rng, dtype=np.float32):
        if dim % num_heads:
            raise ConfigError(f"dim {dim} not divisible by heads {num_heads}")
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}")
        self.dim, self.num_heads, self.window_size, self.variant = dim, num_heads, window_size, variant
        if attn_scale == "sqrt_dim":
            self.scale = math.sqrt(dim)
        elif attn_scale == "sqrt_head_dim":
            self.scale = math.sqrt(dim // num_heads)
        else:
            self.scale = float(attn_scale)
        if variant == "conv_type1":
            self.qkv_channel = Conv2d(dim, 3 * dim, 1, rng, dtype=dtype)
            self.qkv_spatial = Conv2d(3 * dim, 3 * dim, 3, rng, padding=1, groups=3 * dim, dtype=dtype)
        else:
            self.qkv = Linear(dim, 3 * dim, rng, dtype=dtype)
        if variant == "conv_type2":
            self.local = Conv2d(dim, dim, 3, rng, padding=1, groups=dim, dtype=dtype)
        self.bias_table = _param(trunc_normal(rng, ((2 * window_size - 1) ** 2, num_heads), dtype=dtype))
        self.proj = Linear(dim, dim, rng, dtype=dtype)

    def make_qkv(self, y: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        """Return Q, K, V as (Nw, U, T*T, C/U) plus the pre-head V tokens (Nw, T*T, C)."""
        nw, tt, c = y.shape
        if c != self.dim or tt != self.window_size**2:
            raise DimensionError(f"expected windows (*, {self.window_size ** 2}, {self.dim}), got {y.shape}")
        if self.variant == "conv_type1":
            x = _to_spatial(y, self.window_size)
            qkv = _from_spatial(self.qkv_spatial(self.qkv_channel(x)))
        else:
            qkv = self.qkv(y)
        u = self.num_heads
        heads = qkv.reshape(nw, tt, 3, u, c // u).permute(2, 0, 3, 1, 4)
        return heads[0], heads[1], heads[2], qkv[:, :, 2 * c :]

    def attend(self, q: Tensor, k: Tensor, v: Tensor, bias: Tensor, mask: np.ndarray | None = None) -> Tensor:
        """softmax(Q K^T / scale + B [+ mask]) V with heads concatenated: (Nw, T*T, C)."""
        logits = T.matmul(q, k.transpose(-2, -1)) * (1.0 / self.scale) + bias
        if mask is not None:
            n = mask.shape[0]
            nw, u, tt, _ = logits.shape
            logits = logits.reshape(nw // n, n, u, tt, tt) + Tensor(mask[None, :, None].astype(logits.dtype))
            logits = logits.reshape(nw, u, tt, tt)
        attn = T.softmax(logits, axis=-1)
        out = T.matmul(attn, v)
        nw, u, tt, d = out.shape
        return out.permute(0, 2, 1, 3).reshape(nw, tt, u * d)

    def forward(self, y: Tensor, mask: np.ndarray | None = None) -> Tensor:
        q, k, v, v_tokens = self.make_qkv(y)
        out = self.attend(q, k, v, relative_position_bias(self.bias_table, self.window_size), mask)
        if self.variant == "conv_type2":
            out = out + _from_spatial(self.local(_to_spatial(v_tokens, self.window_size)))
        return self.proj(out)


class Mlp(Module):
    def __init__(self, dim: int, hidden: int, rng, dtype=np.float32):
        self.fc1 = Linear(dim, hidden, rng, dtype=dtype)
        self.fc2 = Linear(hidden, dim, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class RSCTBlock(Module):
    """One attention sublayer plus one MLP sublayer, both residual.

    With ``shift > 0`` the map is rolled by ``-shift`` before windowing,
    attention uses the cross-region mask (when ``use_mask``), and the roll is
    undone after merging.
    """

    def __init__(self, dim, num_heads, window_size, shift, cfg: ModelConfig, rng, use_mask=True):
        dtype = cfg.np_dtype
        self.window_size, self.shift, self.use_mask = window_size, shift, use_mask
        self.norm1 = LayerNorm(dim, dtype=dtype)
        self.attn = WindowAttention(dim, num_heads, window_size, cfg.variant, cfg.attn_scale, rng, dtype=dtype)
        self.norm2 = LayerNorm(dim, dtype=dtype)
        self.mlp = Mlp(dim, int(dim * cfg.mlp_ratio), rng, dtype=dtype)
        self._mask_cache: dict[tuple[int, int], np.ndarray] = {}

    def _mask(self, h: int, w: int) -> np.ndarray | None:
        if not self.shift or not self.use_mask:
            return None
        if (h, w) not in self._mask_cache:
            self._mask_cache[(h, w)] = build_attn_mask(h, w, self.window_size, self.shift)
        return self._mask_cache[(h, w)]

    def forward(self, z: Tensor) -> Tensor:
        _, h, w, _ = z.shape
        y = cyclic_shift(self.norm1(z), self.shift)
        y = self.attn(window_partition(y, self.window_size), self._mask(h, w))
        z_hat = cyclic_shift(window_merge(y, h, w, self.window_size), -self.shift) + z
        return self.mlp(self.norm2(z_hat)) + z_hat


class RSCTLayer(Module):
    """An even-length stack of blocks alternating plain and shifted windows."""

    def __init__(self, dim, num_heads, cfg: ModelConfig, rng, decoder=False):
        t = cfg.window_size
        use_mask = cfg.mask_scope == "all" or decoder
        self.blocks = [
            RSCTBlock(dim, num_heads, t, 0 if i % 2 == 0 else t // 2, cfg, rng, use_mask)
            for i in range(cfg.layer_depth)
        ]

    def forward(self, z: Tensor) -> Tensor:
        for block in self.blocks:
            z = block(z)
        return z


def rsctb_pair(plain: RSCTBlock, shifted: RSCTBlock, z: Tensor) -> Tensor:
    """Apply a consecutive (window, shifted-window) block pair."""
    return shifted(plain(z))


# ---------------------------------------------------------------------------
# resolution changes


class PatchEmbed(Module):
    """Non-overlapping P x P patches projected to C channels (a stride-P conv)."""

    def __init__(self, patch_size: int, embed_dim: int, rng, dtype=np.float32):
        self.patch_size = patch_size
        self.proj = Conv2d(3, embed_dim, patch_size, rng, stride=patch_size, dtype=dtype)

    def forward(self, image: Tensor) -> Tensor:
        b, c, h, w = image.shape
        p = self.patch_size
        if c != 3:
            raise DimensionError(f"expected 3-channel image, got {c}")
        if h % p or w % p:
            raise ConfigError(f"image {h}x{w} not divisible by patch size {p}")
        return self.proj(image).permute(0, 2, 3, 1)


class Downsample(Module):
    """Patch merging: concat each 2x2 neighbourhood (4c) and project to 2c.

    Channel order of the concatenation is (r0,c0), (r1,c0), (r0,c1), (r1,c1).
    """

    def __init__(self, dim: int, rng, dtype=np.float32):
        self.reduction = Linear(4 * dim, 2 * dim, rng, bias=False, dtype=dtype)

    def forward(self, z: Tensor) -> Tensor:
        b, h, w, c = z.shape
        if h % 2 or w % 2:
            raise DimensionError(f"downsample needs even spatial dims, got {h}x{w}")
        z = z.reshape(b, h // 2, 2, w // 2, 2, c).permute(0, 1, 3, 4, 2, 5)
        return self.reduction(z.reshape(b, h // 2, w // 2, 4 * c))


class Upsample(Module):
    """Linear expansion c -> f*f*c_out, then pixel rearrangement to (f*h, f*w, c_out)."""

    def __init__(self, dim: int, out_dim: int, factor: int, rng, dtype=np.float32):
        self.factor, self.out_dim = factor, out_dim
        self.expand = Linear(dim, factor * factor * out_dim, rng, bias=False, dtype=dtype)

    def forward(self, z: Tensor) -> Tensor:
        b, h, w, _ = z.shape
        f, c = self.factor, self.out_dim
        z = self.expand(z).reshape(b, h, w, f, f, c).permute(0, 1, 3, 2, 4, 5)
        return z.reshape(b, h * f, w * f, c)


class SkipFuse(Module):
    """Dropout on the encoder feature, concat with the decoder feature, project 2c -> c."""

    def __init__(self, dim: int, drop_ratio: float, rng, dtype=np.float32):
        self.drop_ratio = drop_ratio
        self.proj = Linear(2 * dim, dim, rng, dtype=dtype)
        self.rng: np.random.Generator | None = None

    def forward(self, dec: Tensor, enc: Tensor) -> Tensor:
        if dec.shape != enc.shape:
            raise DimensionError(f"skip shapes differ: {dec.shape} vs {enc.shape}")
        enc = dropout(enc, self.drop_ratio, self.training, self.rng)
        return self.proj(T.concat([dec, enc], axis=-1))


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    if not training or p == 0.0:
        return x
    if p >= 1.0:
        return x * 0.0
    if rng is None:
        raise ConfigError("dropout in training mode needs a random generator")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return x * Tensor(keep)


# ---------------------------------------------------------------------------
# full network


@dataclass
class StageTensors:
    encoder: list[Tensor] = field(default_factory=list)
    bottleneck: Tensor | None = None
    decoder: list[Tensor] = field(default_factory=list)


class URSCT(Module):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        dtype = cfg.np_dtype
        c, u = cfg.embed_dim, cfg.num_heads
        self.patch_embed = PatchEmbed(cfg.patch_size, c, rng, dtype=dtype)
        self.encoder = []
        self.downsample = []
        for i in range(NUM_STAGES):
            self.encoder.append(RSCTLayer(c * 2**i, u, cfg, rng))
            self.downsample.append(Downsample(c * 2**i, rng, dtype=dtype))
        self.bottleneck = RSCTLayer(c * 2**NUM_STAGES, u, cfg, rng)
        self.upsample = [Upsample(c * 2**NUM_STAGES, c * 2 ** (NUM_STAGES - 1), 2, rng, dtype=dtype)]
        self.skip = []
        self.decoder = []
        for i in reversed(range(NUM_STAGES)):
            dim = c * 2**i
            self.skip.append(SkipFuse(dim, cfg.skip_drop_ratio, rng, dtype=dtype))
            self.decoder.append(RSCTLayer(dim, u, cfg, rng, decoder=True))
            if i > 0:
                self.upsample.append(Upsample(dim, dim // 2, 2, rng, dtype=dtype))
            else:
                self.upsample.append(Upsample(dim, dim, cfg.patch_size, rng, dtype=dtype))
        self.to_rgb = Conv2d(c, 3, 3, rng, padding=1, dtype=dtype)

    def set_rng(self, rng: np.random.Generator | None) -> None:
        """Generator used for skip-path dropout in training mode."""
        for s in self.skip:
            s.rng = rng

    def forward(self, image: Tensor, clamp: bool | None = None, stages: StageTensors | None = None) -> Tensor:
        """Enhance a (B,3,H,W) batch. Output is clamped to [0,1] unless training."""
        if image.ndim != 4:
            raise DimensionError(f"expected (B,3,H,W) input, got shape {image.shape}")
        check_image_size(image.shape[2], image.shape[3], self.cfg.patch_size, self.cfg.window_size)
        if image.dtype != self.cfg.np_dtype:
            image = Tensor(image.data.astype(self.cfg.np_dtype))
        x = self.patch_embed(image)
        skips = []
        for layer, down in zip(self.encoder, self.downsample):
            x = layer(x)
            skips.append(x)
            if stages is not None:
                stages.encoder.append(x)
            x = down(x)
        x = self.bottleneck(x)
        if stages is not None:
            stages.bottleneck = x
        x = self.upsample[0](x)
        for fuse, layer, up, enc in zip(self.skip, self.decoder, self.upsample[1:], reversed(skips)):
            x = up(layer(fuse(x, enc)))
            if stages is not None:
                stages.decoder.append(x)
        out = self.to_rgb(x.permute(0, 3, 1, 2))
        if clamp is None:
            clamp = not self.training
        return T.clamp(out, 0.0, 1.0) if clamp else out
