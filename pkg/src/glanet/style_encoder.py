"""MLP-Mixer style encoder producing diagonal-Gaussian style codes."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .config import ConfigError

DOMAINS = ("source", "target")


@dataclass
class StyleCode:
    mu: torch.Tensor  # [..., N]
    sigma: torch.Tensor  # [..., N], >= floor

    def __post_init__(self):
        if self.mu.shape != self.sigma.shape:
            raise ConfigError(f"mu {tuple(self.mu.shape)} and sigma {tuple(self.sigma.shape)} differ")

    @property
    def n(self) -> int:
        return self.mu.shape[-1]

    def detach(self) -> "StyleCode":
        return StyleCode(self.mu.detach(), self.sigma.detach())


def patchify(x: torch.Tensor, p: int) -> torch.Tensor:
    """[B, C, H, W] -> [B, n, C*p*p], patches in row-major order, each flattened as (C, p, p)."""
    b, c, h, w = x.shape
    if h % p or w % p:
        raise ConfigError(f"image {h}x{w} not divisible by patch size {p}")
    x = x.reshape(b, c, h // p, p, w // p, p)
    return x.permute(0, 2, 4, 1, 3, 5).reshape(b, (h // p) * (w // p), c * p * p)


class PatchEmbedding(nn.Module):
    def __init__(self, image_size: int, patch_size: int, embed_dim: int, in_channels: int = 3):
        super().__init__()
        if image_size % patch_size:
            raise ConfigError(f"image size {image_size} not divisible by patch size {patch_size}")
        self.patch_size = patch_size
        self.num_patches = (image_size // patch_size) ** 2
        self.proj = nn.Linear(in_channels * patch_size * patch_size, embed_dim, bias=False)
        self.class_token = nn.Parameter(torch.zeros(embed_dim))
        self.pos_embed = nn.Parameter(torch.randn(self.num_patches + 1, embed_dim) * 0.02)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        patches = patchify(x, self.patch_size)
        if patches.shape[1] != self.num_patches:
            raise ConfigError(f"expected {self.num_patches} patches, got {patches.shape[1]}")
        tokens = self.proj(patches)
        cls = self.class_token.expand(tokens.shape[0], 1, -1)
        return torch.cat([cls, tokens], dim=1) + self.pos_embed


class MixerLayer(nn.Module):
    """Token mixing (W1, W2) then channel mixing (W3, W4), each pre-normed with a residual."""

    def __init__(self, num_tokens: int, dim: int, token_hidden: int, channel_hidden: int):
        super().__init__()
        self.num_tokens = num_tokens
        self.dim = dim
        self.norm1 = nn.LayerNorm(dim)
        self.w1 = nn.Linear(num_tokens, token_hidden)
        self.w2 = nn.Linear(token_hidden, num_tokens)
        self.norm2 = nn.LayerNorm(dim)
        self.w3 = nn.Linear(dim, channel_hidden)
        self.w4 = nn.Linear(channel_hidden, dim)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-2:] != (self.num_tokens, self.dim):
            raise ConfigError(
                f"token sequence {tuple(z.shape[-2:])} does not match layer ({self.num_tokens}, {self.dim})"
            )
        u = self.norm1(z).transpose(-1, -2)
        z = z + self.w2(F.gelu(self.w1(u))).transpose(-1, -2)
        return z + self.w4(F.gelu(self.w3(self.norm2(z))))


class SharedMixer(nn.Module):
    def __init__(self, image_size, patch_size, embed_dim, depth, token_hidden, channel_hidden):
        super().__init__()
        self.embed = PatchEmbedding(image_size, patch_size, embed_dim)
        n_tok = self.embed.num_patches + 1
        self.layers = nn.ModuleList(
            MixerLayer(n_tok, embed_dim, token_hidden, channel_hidden) for _ in range(depth)
        )

    def forward(self, x):
        z = self.embed(x)
        for layer in self.layers:
            z = layer(z)
        return z


class StyleEncoder(nn.Module):
    """Shared Mixer trunk with one fully-connected head per domain.

    Each head emits 2N values; the first N are the mean, the last N pass through
    softplus plus ``sigma_floor`` to give a strictly positive scale.
    """

    def __init__(
        self,
        image_size: int = 64,
        n: int = 32,
        patch_size: int = 8,
        embed_dim: int = 128,
        depth: int = 1,
        token_hidden: int = 256,
        channel_hidden: int = 256,
        readout: str = "mean",
        sigma_floor: float = 1e-4,
    ):
        super().__init__()
        if readout not in ("mean", "class"):
            raise ConfigError(f"unknown readout {readout!r}")
        self.n = n
        self.readout = readout
        self.sigma_floor = sigma_floor
        self.shared = SharedMixer(image_size, patch_size, embed_dim, depth, token_hidden, channel_hidden)
        self.head_source = nn.Linear(embed_dim, 2 * n)
        self.head_target = nn.Linear(embed_dim, 2 * n)

    @classmethod
    def from_config(cls, cfg, image_size: int) -> "StyleEncoder":
        return cls(
            image_size=image_size,
            n=cfg.n,
            patch_size=cfg.patch_size,
            embed_dim=cfg.embed_dim,
            depth=cfg.depth,
            token_hidden=cfg.token_hidden,
            channel_hidden=cfg.channel_hidden,
            readout=cfg.readout,
            sigma_floor=cfg.sigma_floor,
        )

    def head(self, domain: str) -> nn.Linear:
        if domain not in DOMAINS:
            raise ConfigError(f"unknown domain {domain!r}")
        return self.head_source if domain == "source" else self.head_target

    def forward(self, x: torch.Tensor, domain: str) -> StyleCode:
        head = self.head(domain)
        unbatched = x.dim() == 3
        if unbatched:
            x = x.unsqueeze(0)
        z = self.shared(x)
        pooled = z.mean(dim=1) if self.readout == "mean" else z[:, 0]
        out = head(pooled)
        mu, raw = out[:, : self.n], out[:, self.n :]
        code = StyleCode(mu, F.softplus(raw) + self.sigma_floor)
        if unbatched:
            code = StyleCode(code.mu[0], code.sigma[0])
        return code


def encode_style(x: torch.Tensor, domain: str, encoder: StyleEncoder) -> StyleCode:
    return encoder(x, domain)
