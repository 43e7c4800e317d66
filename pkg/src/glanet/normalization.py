"""Instance normalization, classic AdaIN and the style-code driven AdaIN variant."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .config import ConfigError

EPS = 1e-5


@dataclass
class ChannelStats:
    mean: torch.Tensor  # [..., C]
    std: torch.Tensor  # [..., C], >= eps


def channel_stats(x: torch.Tensor, eps: float = EPS) -> ChannelStats:
    """Per-sample, per-channel statistics over the two trailing spatial dims."""
    if x.shape[-1] * x.shape[-2] < 2:
        raise ConfigError("instance statistics need at least 2 spatial positions")
    mean = x.mean(dim=(-2, -1))
    var = x.var(dim=(-2, -1), unbiased=False)
    # clamp before sqrt so constant channels get a zero (not NaN) gradient
    return ChannelStats(mean, var.clamp_min(eps * eps).sqrt())


def _standardize(x: torch.Tensor, eps: float) -> torch.Tensor:
    s = channel_stats(x, eps)
    return (x - s.mean[..., None, None]) / s.std[..., None, None]


def instance_norm(x, gamma=None, kappa=None, eps: float = EPS) -> torch.Tensor:
    out = _standardize(x, eps)
    if gamma is not None:
        out = out * gamma[..., None, None]
    if kappa is not None:
        out = out + kappa[..., None, None]
    return out


def adain_classic(x: torch.Tensor, y_stats: ChannelStats, eps: float = EPS) -> torch.Tensor:
    c = x.shape[-3]
    if y_stats.mean.shape[-1] != c or y_stats.std.shape[-1] != c:
        raise ConfigError(f"channel mismatch: features have {c}, stats have {y_stats.mean.shape[-1]}")
    return instance_norm(x, y_stats.std, y_stats.mean, eps)


class StyleProjection(nn.Module):
    """Affine map from a style vector (mu || sigma) to per-channel (gamma, beta)."""

    def __init__(self, n: int, channels: int):
        super().__init__()
        self.n = n
        self.channels = channels
        self.linear = nn.Linear(2 * n, 2 * channels)

    @torch.no_grad()
    def identity_(self) -> "StyleProjection":
        """gamma = sigma, beta = mu; only defined when n == channels."""
        if self.n != self.channels:
            raise ConfigError(f"identity projection needs n == channels, got {self.n} vs {self.channels}")
        eye = torch.eye(self.n, dtype=self.linear.weight.dtype)
        w = torch.zeros_like(self.linear.weight)
        w[: self.n, self.n :] = eye
        w[self.n :, : self.n] = eye
        self.linear.weight.copy_(w)
        self.linear.bias.zero_()
        return self

    @torch.no_grad()
    def plain_(self) -> "StyleProjection":
        """Ignore the style code: gamma = 1, beta = 0 (plain instance norm)."""
        self.linear.weight.zero_()
        self.linear.bias.zero_()
        self.linear.bias[: self.channels] = 1.0
        return self

    def forward(self, mu: torch.Tensor, sigma: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if mu.shape[-1] != self.n or sigma.shape[-1] != self.n:
            raise ConfigError(f"style code length {mu.shape[-1]} does not match projection width {self.n}")
        out = self.linear(torch.cat([mu, sigma], dim=-1))
        return out[..., : self.channels], out[..., self.channels :]


def adain_new(x: torch.Tensor, code, proj: StyleProjection, eps: float = EPS) -> torch.Tensor:
    if proj.channels != x.shape[-3]:
        raise ConfigError(
            f"projection emits {2 * proj.channels} values, layer needs {2 * x.shape[-3]}"
        )
    gamma, beta = proj(code.mu, code.sigma)
    return instance_norm(x, gamma, beta, eps)
