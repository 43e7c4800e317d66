"""Attention-weighted spatially-correlative content loss.

Pieces: an attention provider (frozen ViT class-token attention or a
dependency-free gradient saliency stub), a multi-tap feature extractor
(fixed random conv stack or VGG16 conv taps), per-query correlation rows
over a local patch, and the 1 - cosine loss between source and output rows.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .config import ConfigError

log = logging.getLogger(__name__)

PROVIDERS = ("saliency_stub", "pretrained_vit")
EXTRACTORS = ("random", "vgg16")
_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)


class ProviderError(RuntimeError):
    """A pretrained component could not be constructed."""


def _imagenet_normalize(x: torch.Tensor) -> torch.Tensor:
    mean = x.new_tensor(_IMAGENET_MEAN)[:, None, None]
    std = x.new_tensor(_IMAGENET_STD)[:, None, None]
    return ((x + 1) / 2 - mean) / std


def _load_state_dict(path, who: str) -> dict:
    if path is None or not Path(path).is_file():
        raise ProviderError(f"{who}: weight file not found: {path}")
    sd = torch.load(path, map_location="cpu", weights_only=True)
    for key in ("teacher", "state_dict", "model"):
        if isinstance(sd, dict) and key in sd and isinstance(sd[key], dict):
            sd = sd[key]
    out = {}
    for k, v in sd.items():
        for prefix in ("module.", "backbone."):
            if k.startswith(prefix):
                k = k[len(prefix) :]
        out[k] = v
    return out


# --------------------------------------------------------------------------- attention


def minmax_normalize(a: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Per-image min-max scaling of [B, H, W] to [0, 1]; flat maps become zeros."""
    flat = a.flatten(1)
    lo = flat.min(dim=1).values[:, None, None]
    hi = flat.max(dim=1).values[:, None, None]
    span = hi - lo
    out = (a - lo) / span.clamp_min(eps)
    return torch.where(span < eps, torch.zeros_like(a), out).clamp(0.0, 1.0)


class SaliencyStub:
    """Normalized intensity-gradient magnitude (central differences, replicate border)."""

    name = "saliency_stub"

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        gray = x.mean(dim=1, keepdim=True)
        p = F.pad(gray, (1, 1, 1, 1), mode="replicate")
        gx = (p[..., 1:-1, 2:] - p[..., 1:-1, :-2]) / 2
        gy = (p[..., 2:, 1:-1] - p[..., :-2, 1:-1]) / 2
        return minmax_normalize(torch.sqrt(gx**2 + gy**2)[:, 0])


class _Attention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, t, c = x.shape
        qkv = self.qkv(x).reshape(b, t, 3, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = ((q @ k.transpose(-2, -1)) * self.scale).softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, t, c)
        return self.proj(out), attn


class _Mlp(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class _Block(nn.Module):
    def __init__(self, dim, heads, mlp_ratio=4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = _Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = _Mlp(dim, dim * mlp_ratio)

    def forward(self, x):
        y, attn = self.attn(self.norm1(x))
        x = x + y
        return x + self.mlp(self.norm2(x)), attn


class _PatchEmbed(nn.Module):
    def __init__(self, patch, dim):
        super().__init__()
        self.proj = nn.Conv2d(3, dim, patch, stride=patch)


class VisionTransformer(nn.Module):
    """Minimal ViT whose parameter names match the common DINO checkpoints."""

    def __init__(self, patch_size=8, dim=384, depth=12, heads=6, grid=28):
        super().__init__()
        self.patch_size = patch_size
        self.patch_embed = _PatchEmbed(patch_size, dim)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, dim))
        self.pos_embed = nn.Parameter(torch.randn(1, grid * grid + 1, dim) * 0.02)
        self.blocks = nn.ModuleList(_Block(dim, heads) for _ in range(depth))
        self.norm = nn.LayerNorm(dim, eps=1e-6)

    def _pos(self, gh, gw):
        cls_pos, grid_pos = self.pos_embed[:, :1], self.pos_embed[:, 1:]
        g0 = int(math.isqrt(grid_pos.shape[1]))
        if (gh, gw) == (g0, g0):
            return self.pos_embed
        grid_pos = grid_pos.reshape(1, g0, g0, -1).permute(0, 3, 1, 2)
        grid_pos = F.interpolate(grid_pos, size=(gh, gw), mode="bicubic", align_corners=False)
        return torch.cat([cls_pos, grid_pos.flatten(2).transpose(1, 2)], dim=1)

    def get_last_selfattention(self, x: torch.Tensor) -> torch.Tensor:
        gh, gw = x.shape[-2] // self.patch_size, x.shape[-1] // self.patch_size
        tok = self.patch_embed.proj(x).flatten(2).transpose(1, 2)
        tok = torch.cat([self.cls_token.expand(tok.shape[0], -1, -1), tok], dim=1) + self._pos(gh, gw)
        attn = None
        for blk in self.blocks:
            tok, attn = blk(tok)
        return attn

    @classmethod
    def from_state_dict(cls, sd: dict, heads: int = 6) -> "VisionTransformer":
        dim = sd["cls_token"].shape[-1]
        patch = sd["patch_embed.proj.weight"].shape[-1]
        depth = 1 + max(int(k.split(".")[1]) for k in sd if k.startswith("blocks."))
        grid = int(math.isqrt(sd["pos_embed"].shape[1] - 1))
        model = cls(patch, dim, depth, heads, grid)
        model.load_state_dict({k: v for k, v in sd.items() if not k.startswith("head")})
        return model


class VitAttention:
    """Head-averaged class-token attention of the last block, upsampled to the image."""

    name = "pretrained_vit"

    def __init__(self, weights, heads: int = 6):
        sd = _load_state_dict(weights, self.name)
        self.model = VisionTransformer.from_state_dict(sd, heads).eval().requires_grad_(False)
        self.weights = str(weights)

    @torch.no_grad()
    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        p = self.model.patch_size
        h, w = x.shape[-2:]
        if h % p or w % p:
            raise ConfigError(f"image {h}x{w} not divisible by ViT patch size {p}")
        dtype = next(self.model.parameters()).dtype
        attn = self.model.get_last_selfattention(_imagenet_normalize(x.to(dtype)))
        cls_attn = attn[:, :, 0, 1:].mean(dim=1).reshape(-1, 1, h // p, w // p)
        up = F.interpolate(cls_attn, size=(h, w), mode="bilinear", align_corners=False)
        return minmax_normalize(up[:, 0]).to(x.dtype)


def make_provider(name: str, weights=None):
    if name == "saliency_stub":
        return SaliencyStub()
    if name == "pretrained_vit":
        return VitAttention(weights)
    raise ConfigError(f"unknown attention provider {name!r}; expected one of {PROVIDERS}")


def attention_map(x: torch.Tensor, provider) -> torch.Tensor:
    """Attention weights in [0, 1] for ``x`` ([3,H,W] or [B,3,H,W]); never carries gradient."""
    unbatched = x.dim() == 3
    xb = x.unsqueeze(0) if unbatched else x
    with torch.no_grad():
        a = provider(xb.detach())
    return a[0] if unbatched else a


def apply_attention(x: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
    if x.shape[-2:] != a.shape[-2:] or (x.dim() == 4 and a.dim() == 3 and a.shape[0] != x.shape[0]):
        raise ConfigError(f"attention map {tuple(a.shape)} does not match image {tuple(x.shape)}")
    return x * a.detach().unsqueeze(-3)


# --------------------------------------------------------------------------- features


@dataclass
class FeatureStack:
    features: list[torch.Tensor]  # each [B, C, h, w]
    taps: list[str]


class RandomConvExtractor(nn.Module):
    """Fixed-seed random conv stack: three stride-2 3x3 conv + ReLU blocks, tapped after each."""

    def __init__(self, seed: int = 0, widths: Sequence[int] = (16, 32, 64), in_channels: int = 3):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.seed = seed
        self.convs = nn.ModuleList()
        c_in = in_channels
        for c in widths:
            conv = nn.Conv2d(c_in, c, 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * math.sqrt(2.0 / (9 * c_in)))
                conv.bias.copy_(torch.randn(conv.bias.shape, generator=gen) * 0.01)
            self.convs.append(conv)
            c_in = c
        self.requires_grad_(False)
        self.identity = f"random_conv(seed={seed},widths={tuple(widths)})"

    def forward(self, img: torch.Tensor) -> FeatureStack:
        feats, h = [], img
        for conv in self.convs:
            h = F.relu(conv(h))
            feats.append(h)
        return FeatureStack(feats, [f"conv{i + 1}" for i in range(len(feats))])


# torchvision vgg16 "features" layout up to the ReLU after the ninth conv
_VGG_LAYOUT = [64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512]
_VGG_TAPS = {4: "conv2d_4", 7: "conv2d_7", 9: "conv2d_9"}


class VGG16Extractor(nn.Module):
    """VGG16 conv taps 4, 7 and 9 (post-ReLU); needs an ImageNet weight file."""

    def __init__(self, weights):
        super().__init__()
        sd = _load_state_dict(weights, "vgg16 extractor")
        layers, c_in, self._tap_index = [], 3, {}
        conv_count = 0
        for v in _VGG_LAYOUT:
            if v == "M":
                layers.append(nn.MaxPool2d(2, 2))
                continue
            layers += [nn.Conv2d(c_in, v, 3, padding=1), nn.ReLU(inplace=False)]
            conv_count += 1
            if conv_count in _VGG_TAPS:
                self._tap_index[len(layers) - 1] = _VGG_TAPS[conv_count]
            c_in = v
        self.features = nn.Sequential(*layers)
        keep = {k: v for k, v in sd.items() if k.startswith("features.") and int(k.split(".")[1]) < len(layers)}
        self.load_state_dict(keep)
        self.requires_grad_(False)
        self.identity = f"vgg16({Path(weights).name})"

    def forward(self, img: torch.Tensor) -> FeatureStack:
        h = _imagenet_normalize(img)
        feats, taps = [], []
        for i, layer in enumerate(self.features):
            h = layer(h)
            if i in self._tap_index:
                feats.append(h)
                taps.append(self._tap_index[i])
        return FeatureStack(feats, taps)


def make_extractor(name: str, weights=None, seed: int = 0):
    if name == "random":
        return RandomConvExtractor(seed)
    if name == "vgg16":
        return VGG16Extractor(weights)
    raise ConfigError(f"unknown feature extractor {name!r}; expected one of {EXTRACTORS}")


def extract_features(img: torch.Tensor, extractor: Callable[[torch.Tensor], FeatureStack]) -> FeatureStack:
    unbatched = img.dim() == 3
    stack = extractor(img.unsqueeze(0) if unbatched else img)
    if not stack.features:
        raise ConfigError("extractor produced no feature taps")
    return stack


# --------------------------------------------------------------------------- correlation


@dataclass
class SpatialCorrelativeMap:
    rows: torch.Tensor  # [B, Q, K]
    queries: torch.Tensor  # [Q, 2] (row, col) in feature coordinates
    offsets: torch.Tensor  # [K, 2] (dy, dx)
    valid: torch.Tensor  # [Q, K] key inside the feature map


def patch_offsets(radius: int) -> torch.Tensor:
    r = torch.arange(-radius, radius + 1)
    dy, dx = torch.meshgrid(r, r, indexing="ij")
    return torch.stack([dy.flatten(), dx.flatten()], dim=1)


def sample_queries(h: int, w: int, num: int, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    idx = torch.randperm(h * w, generator=generator)[: min(num, h * w)]
    return torch.stack([idx // w, idx % w], dim=1)


def l2_normalize(f: torch.Tensor) -> torch.Tensor:
    """Unit-normalize along channels; zero vectors stay zero."""
    n2 = (f * f).sum(dim=1, keepdim=True)
    return f / torch.sqrt(torch.where(n2 > 0, n2, torch.ones_like(n2)))


def spatial_correlative_map(stack: FeatureStack, layer: int, queries: torch.Tensor,
                            patch_radius: int) -> SpatialCorrelativeMap:
    """Inner products of each query's unit feature with the unit features of its patch.

    Keys falling outside the map read as zero vectors (so their entries are 0).
    """
    if queries.numel() == 0:
        raise ConfigError("empty query set")
    f = stack.features[layer]
    h, w = f.shape[-2:]
    qr, qc = queries[:, 0], queries[:, 1]
    if (qr < 0).any() or (qr >= h).any() or (qc < 0).any() or (qc >= w).any():
        raise ConfigError(f"query outside feature map of size {h}x{w}")
    r = patch_radius
    fn = l2_normalize(f)
    padded = F.pad(fn, (r, r, r, r))
    offsets = patch_offsets(r)
    kr = qr[:, None] + r + offsets[None, :, 0]
    kc = qc[:, None] + r + offsets[None, :, 1]
    keys = padded[:, :, kr, kc]  # [B, C, Q, K]
    center = fn[:, :, qr, qc]  # [B, C, Q]
    rows = (center.unsqueeze(-1) * keys).sum(dim=1)
    true_r, true_c = kr - r, kc - r
    valid = (true_r >= 0) & (true_r < h) & (true_c >= 0) & (true_c < w)
    return SpatialCorrelativeMap(rows, queries, offsets, valid)


def row_cosine(a: torch.Tensor, b: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Cosine between matching rows plus a mask of rows where both norms are nonzero."""
    dot = (a * b).sum(-1)
    na, nb = (a * a).sum(-1), (b * b).sum(-1)
    ok = (na > 0) & (nb > 0)
    prod = torch.where(ok, na * nb, torch.ones_like(na))
    return (dot / torch.sqrt(prod)).clamp(-1.0, 1.0), ok


def local_loss(
    x: torch.Tensor,
    y_hat: torch.Tensor,
    a: torch.Tensor,
    extractor,
    num_queries: int = 256,
    patch_radius: int = 4,
    generator: Optional[torch.Generator] = None,
    layer_reduction: str = "mean",
    provider=None,
) -> torch.Tensor:
    """Mean of (1 - cos) between correlation rows of the attention-weighted x and y_hat.

    ``a`` comes from ``x`` and is reused for ``y_hat``. Passing ``provider``
    recomputes attention on ``y_hat`` instead (experimental).
    """
    if x.shape != y_hat.shape:
        raise ConfigError(f"x {tuple(x.shape)} and y_hat {tuple(y_hat.shape)} differ in shape")
    if layer_reduction not in ("mean", "sum"):
        raise ConfigError(f"unknown layer reduction {layer_reduction!r}")
    a_hat = attention_map(y_hat, provider) if provider is not None else a
    sx = extract_features(apply_attention(x, a), extractor)
    sy = extract_features(apply_attention(y_hat, a_hat), extractor)
    per_layer = []
    for layer in range(len(sx.features)):
        h, w = sx.features[layer].shape[-2:]
        q = sample_queries(h, w, num_queries, generator)
        mx = spatial_correlative_map(sx, layer, q, patch_radius)
        my = spatial_correlative_map(sy, layer, q, patch_radius)
        cos, ok = row_cosine(mx.rows, my.rows)
        if not ok.any():
            continue
        per_layer.append((1 - cos)[ok].mean())
    if not per_layer:
        log.warning("local loss: every correlation row has zero norm; returning 0")
        return y_hat.new_zeros(())
    total = torch.stack(per_layer)
    return total.mean() if layer_reduction == "mean" else total.sum()
