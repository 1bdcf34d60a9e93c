"""Network building blocks, one per operator of the unfolded solver.

All feature maps are ``(B, C, H, W)``. Window attention works on
``(B * num_windows, window * window, C)`` token tensors internally.
"""
import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

__all__ = [
    "BlockConfig",
    "SFEM",
    "DegradationMLP",
    "WindowAttention",
    "WindowTransformerBlock",
    "SAM",
    "SFM",
    "ChannelAttention",
    "GatedFFN",
    "CFM",
    "DCM",
    "ResidualFuse",
    "ReconHead",
    "window_partition",
    "window_reverse",
]


@dataclass(frozen=True)
class BlockConfig:
    channels: int = 32
    window_size: int = 8
    num_heads: int = 4
    ffn_expansion: float = 2.0

    def __post_init__(self):
        for name in ("channels", "window_size", "num_heads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.ffn_expansion <= 0:
            raise ValueError("ffn_expansion must be positive")
        if self.channels % self.num_heads:
            raise ValueError(f"channels ({self.channels}) must be divisible by num_heads ({self.num_heads})")


def _check_same(*tensors, names):
    ref = tensors[0].shape
    for t, n in zip(tensors[1:], names[1:]):
        if t.shape != ref:
            raise ValueError(f"{n}: shape {tuple(t.shape)} does not match {names[0]} {tuple(ref)}")


def _check_channels(t, channels, name):
    if t.dim() != 4 or t.shape[1] != channels:
        raise ValueError(f"{name}: expected (B, {channels}, H, W), got {tuple(t.shape)}")


def window_partition(x, ws):
    """(B, C, H, W) -> (B * nW, ws * ws, C)."""
    B, C, H, W = x.shape
    if H % ws or W % ws:
        raise ValueError(f"spatial size {H}x{W} is not a multiple of window size {ws}")
    return rearrange(x, "b c (h p1) (w p2) -> (b h w) (p1 p2) c", p1=ws, p2=ws)


def window_reverse(tokens, ws, H, W):
    """Inverse of :func:`window_partition`."""
    return rearrange(tokens, "(b h w) (p1 p2) c -> b c (h p1) (w p2)", h=H // ws, w=W // ws, p1=ws, p2=ws)


class SFEM(nn.Module):
    """3x3 conv lifting a 6-channel [LDR, gamma-corrected] input into features."""

    in_channels = 6

    def __init__(self, channels):
        super().__init__()
        self.conv = nn.Conv2d(self.in_channels, channels, 3, padding=1)

    def forward(self, y):
        if y.dim() != 4 or y.shape[1] != self.in_channels:
            raise ValueError(f"SFEM expects (B, 6, H, W) input, got {tuple(y.shape)}")
        return self.conv(y)


class DegradationMLP(nn.Module):
    """Pointwise two-layer MLP standing in for a learned degradation operator."""

    def __init__(self, channels, expansion=2.0):
        super().__init__()
        hidden = int(channels * expansion)
        self.fc1 = nn.Conv2d(channels, hidden, 1)
        self.act = nn.GELU()
        self.fc2 = nn.Conv2d(hidden, channels, 1)

    def forward(self, f):
        return self.fc2(self.act(self.fc1(f)))


class WindowAttention(nn.Module):
    """Multi-head attention inside one window, with a relative position bias.

    Queries come from ``q_tokens``; keys and values from ``kv_tokens``.
    """

    def __init__(self, dim, window_size, num_heads):
        super().__init__()
        self.dim = dim
        self.window_size = window_size
        self.num_heads = num_heads
        head_dim = dim // num_heads
        self.scale = head_dim ** -0.5

        self.relative_position_bias_table = nn.Parameter(torch.zeros((2 * window_size - 1) ** 2, num_heads))
        coords = torch.stack(torch.meshgrid(torch.arange(window_size), torch.arange(window_size), indexing="ij"))
        coords = coords.flatten(1)
        rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0) + (window_size - 1)
        index = rel[..., 0] * (2 * window_size - 1) + rel[..., 1]
        self.register_buffer("relative_position_index", index, persistent=False)

        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)
        nn.init.trunc_normal_(self.relative_position_bias_table, std=0.02)

    def forward(self, q_tokens, kv_tokens):
        n = q_tokens.shape[1]
        h = self.num_heads
        q = rearrange(self.q(q_tokens), "b n (h d) -> b h n d", h=h)
        k = rearrange(self.k(kv_tokens), "b n (h d) -> b h n d", h=h)
        v = rearrange(self.v(kv_tokens), "b n (h d) -> b h n d", h=h)

        attn = (q * self.scale) @ k.transpose(-2, -1)
        bias = self.relative_position_bias_table[self.relative_position_index.view(-1)]
        attn = attn + bias.view(n, n, h).permute(2, 0, 1).unsqueeze(0)
        attn = attn.softmax(dim=-1)

        out = rearrange(attn @ v, "b h n d -> b n (h d)")
        return self.proj(out)


class WindowTransformerBlock(nn.Module):
    """Pre-norm window transformer block: attention then token MLP, both residual.

    Called with one argument it is plain window self-attention; with a
    ``context`` map the keys/values are taken from it instead.
    """

    def __init__(self, dim, window_size, num_heads, ffn_expansion=2.0):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"dim ({dim}) must be divisible by num_heads ({num_heads})")
        self.window_size = window_size
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, window_size, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * ffn_expansion)
        self.ffn = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x, context=None):
        B, C, H, W = x.shape
        ws = self.window_size
        tokens = window_partition(x, ws)
        q_in = self.norm1(tokens)
        if context is None:
            kv_in = q_in
        else:
            _check_same(x, context, names=("x", "context"))
            kv_in = self.norm1(window_partition(context, ws))
        tokens = tokens + self.attn(q_in, kv_in)
        tokens = tokens + self.ffn(self.norm2(tokens))
        return window_reverse(tokens, ws, H, W)


class SAM(nn.Module):
    """Spatial alignment: window cross-attention of an exposure feature onto f_x.

    K and V read ``f_align + MLP_D(f_x)``, Q reads ``f_align`` only.
    """

    def __init__(self, cfg: BlockConfig):
        super().__init__()
        self.degrade = DegradationMLP(cfg.channels, 2.0)
        self.block = WindowTransformerBlock(cfg.channels, cfg.window_size, cfg.num_heads, cfg.ffn_expansion)

    def forward(self, f_align, f_x):
        _check_same(f_align, f_x, names=("f_align", "f_x"))
        return self.block(f_align, f_align + self.degrade(f_x))


class SFM(nn.Module):
    """Spatial fusion at 3C channels, split back into (f_us, f_r, f_vs)."""

    def __init__(self, cfg: BlockConfig):
        super().__init__()
        self.channels = cfg.channels
        self.body = WindowTransformerBlock(3 * cfg.channels, cfg.window_size, cfg.num_heads, cfg.ffn_expansion)

    def forward(self, f_a1, f_x, f_a3):
        _check_same(f_a1, f_x, f_a3, names=("f_a1", "f_x", "f_a3"))
        _check_channels(f_x, self.channels, "f_x")
        fused = self.body(torch.cat([f_a1, f_x, f_a3], dim=1))
        f_us, f_r, f_vs = torch.split(fused, self.channels, dim=1)
        return f_us, f_r, f_vs


class ChannelLayerNorm(nn.Module):
    """LayerNorm over the channel axis of a (B, C, H, W) map."""

    def __init__(self, channels):
        super().__init__()
        self.norm = nn.LayerNorm(channels)

    def forward(self, x):
        return self.norm(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


class ChannelAttention(nn.Module):
    """Transposed attention: a C x C map per head, pooled over all positions.

    Projections are 1x1 only so the block stays equivariant to spatial permutations.
    """

    def __init__(self, channels, num_heads):
        super().__init__()
        self.num_heads = num_heads
        self.temperature = nn.Parameter(torch.ones(num_heads, 1, 1))
        self.q = nn.Conv2d(channels, channels, 1)
        self.kv = nn.Conv2d(channels, 2 * channels, 1)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, q_map, kv_map):
        B, C, H, W = q_map.shape
        h = self.num_heads
        q = rearrange(self.q(q_map), "b (h c) x y -> b h c (x y)", h=h)
        k, v = self.kv(kv_map).chunk(2, dim=1)
        k = rearrange(k, "b (h c) x y -> b h c (x y)", h=h)
        v = rearrange(v, "b (h c) x y -> b h c (x y)", h=h)
        q = F.normalize(q, dim=-1)
        k = F.normalize(k, dim=-1)
        attn = (q @ k.transpose(-2, -1)) * self.temperature
        attn = attn.softmax(dim=-1)
        out = rearrange(attn @ v, "b h c (x y) -> b (h c) x y", x=H, y=W)
        return self.proj(out)


class GatedFFN(nn.Module):
    def __init__(self, channels, expansion=2.0):
        super().__init__()
        hidden = int(channels * expansion)
        self.project_in = nn.Conv2d(channels, 2 * hidden, 1)
        self.project_out = nn.Conv2d(hidden, channels, 1)

    def forward(self, x):
        x1, x2 = self.project_in(x).chunk(2, dim=1)
        return self.project_out(F.gelu(x1) * x2)


class CFM(nn.Module):
    """Channel fusion: refines a spatially fused feature against the read-only f_x."""

    def __init__(self, cfg: BlockConfig):
        super().__init__()
        self.norm_s = ChannelLayerNorm(cfg.channels)
        self.norm_x = ChannelLayerNorm(cfg.channels)
        self.attn = ChannelAttention(cfg.channels, cfg.num_heads)
        self.norm2 = ChannelLayerNorm(cfg.channels)
        self.ffn = GatedFFN(cfg.channels, cfg.ffn_expansion)

    def forward(self, f_s, f_x):
        _check_same(f_s, f_x, names=("f_s", "f_x"))
        out = f_s + self.attn(self.norm_s(f_s), self.norm_x(f_x))
        return out + self.ffn(self.norm2(out))


_SOFTPLUS_ONE = math.log(math.e - 1.0)


class DCM(nn.Module):
    """Feature-space closed-form x-update: B^-1 (D2^T f_y2 + b1 f_u + b3 f_v).

    ``beta1``/``beta3`` are kept positive through a softplus and start at 1.
    """

    def __init__(self, cfg: BlockConfig):
        super().__init__()
        self.d2t = DegradationMLP(cfg.channels, 2.0)
        self.binv = DegradationMLP(cfg.channels, 2.0)
        self.beta1_raw = nn.Parameter(torch.tensor(_SOFTPLUS_ONE))
        self.beta3_raw = nn.Parameter(torch.tensor(_SOFTPLUS_ONE))

    @property
    def beta1(self):
        return F.softplus(self.beta1_raw)

    @property
    def beta3(self):
        return F.softplus(self.beta3_raw)

    def forward(self, f_u, f_y2, f_v):
        _check_same(f_u, f_y2, f_v, names=("f_u", "f_y2", "f_v"))
        return self.binv(self.d2t(f_y2) + self.beta1 * f_u + self.beta3 * f_v)


class ResidualFuse(nn.Module):
    """f_x = MLP([f_u, f_xp, f_v]) + f_r with a pointwise 3C -> C MLP."""

    def __init__(self, channels):
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Conv2d(3 * channels, channels, 1),
            nn.GELU(),
            nn.Conv2d(channels, channels, 1),
        )

    def forward(self, f_u, f_xp, f_v, f_r):
        _check_same(f_u, f_xp, f_v, f_r, names=("f_u", "f_xp", "f_v", "f_r"))
        return self.mlp(torch.cat([f_u, f_xp, f_v], dim=1)) + f_r


class ReconHead(nn.Module):
    """x_hat = sigmoid(conv(f_xT + conv(f_y2)))."""

    def __init__(self, channels, out_channels=3):
        super().__init__()
        self.skip = nn.Conv2d(channels, channels, 3, padding=1)
        self.out = nn.Conv2d(channels, out_channels, 3, padding=1)

    def forward(self, f_xT, f_y2):
        _check_same(f_xT, f_y2, names=("f_xT", "f_y2"))
        return torch.sigmoid(self.out(f_xT + self.skip(f_y2)))
