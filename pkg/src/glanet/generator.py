"""UNet content encoder / decoder; the decoder is conditioned on a style code through AdaIN-new."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .config import ConfigError
from .normalization import StyleProjection, adain_new, instance_norm
from .style_encoder import StyleCode


@dataclass
class ContentCode:
    bottleneck: torch.Tensor
    skips: list[torch.Tensor]  # one per encoder level, finest first


class NormAffine(nn.Module):
    """Instance norm with learnable per-channel scale and shift."""

    def __init__(self, channels: int):
        super().__init__()
        self.gamma = nn.Parameter(torch.ones(channels))
        self.kappa = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        return instance_norm(x, self.gamma, self.kappa)


class DownBlock(nn.Module):
    def __init__(self, c_in, c_out):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 4, stride=2, padding=1)
        self.norm = NormAffine(c_out)

    def forward(self, x):
        return F.leaky_relu(self.norm(self.conv(x)), 0.2)


class ContentEncoder(nn.Module):
    def __init__(self, depth: int = 3, base_channels: int = 64, max_channels: int = 256, in_channels: int = 3):
        super().__init__()
        self.depth = depth
        self.channels = [min(base_channels * 2**i, max_channels) for i in range(depth)]
        ins = [in_channels] + self.channels[:-1]
        self.down = nn.ModuleList(DownBlock(a, b) for a, b in zip(ins, self.channels))
        c = self.channels[-1]
        self.mid_conv = nn.Conv2d(c, c, 3, padding=1)
        self.mid_norm = NormAffine(c)

    def forward(self, x) -> ContentCode:
        h, w = x.shape[-2:]
        if h % 2**self.depth or w % 2**self.depth:
            raise ConfigError(f"resolution {h}x{w} not divisible by 2**{self.depth}")
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
        bottleneck = F.relu(self.mid_norm(self.mid_conv(x)))
        return ContentCode(bottleneck, skips)


class StyledDecoder(nn.Module):
    """Walks the pyramid coarse to fine: concat skip, conv, AdaIN-new, ReLU, upsample."""

    def __init__(self, channels: list[int], n: int, out_channels: int = 3):
        super().__init__()
        self.n = n
        depth = len(channels)
        self.convs = nn.ModuleList()
        outs = []
        c_prev = channels[-1]
        for i in reversed(range(depth)):
            c_out = channels[i - 1] if i > 0 else channels[0]
            self.convs.append(nn.Conv2d(c_prev + channels[i], c_out, 3, padding=1))
            outs.append(c_out)
            c_prev = c_out
        # named adain_{k} so parameters serialize as generator.decoder.adain_{k}.proj.*
        for k, c in enumerate(outs):
            site = nn.Module()
            site.proj = StyleProjection(n, c)
            self.add_module(f"adain_{k}", site)
        self.out_conv = nn.Conv2d(c_prev, out_channels, 3, padding=1)

    def projections(self) -> list[StyleProjection]:
        return [getattr(self, f"adain_{k}").proj for k in range(len(self.convs))]

    def forward(self, content: ContentCode, code: StyleCode) -> torch.Tensor:
        if code.n != self.n:
            raise ConfigError(f"style code length {code.n} does not match decoder N={self.n}")
        h = content.bottleneck
        for conv, proj, skip in zip(self.convs, self.projections(), reversed(content.skips)):
            h = conv(torch.cat([h, skip], dim=1))
            h = F.relu(adain_new(h, code, proj))
            h = F.interpolate(h, scale_factor=2, mode="nearest")
        return torch.tanh(self.out_conv(h))


class Generator(nn.Module):
    def __init__(self, n: int = 32, depth: int = 3, base_channels: int = 64, max_channels: int = 256,
                 use_adain_new: bool = True):
        super().__init__()
        self.encoder = ContentEncoder(depth, base_channels, max_channels)
        self.decoder = StyledDecoder(self.encoder.channels, n)
        self.use_adain_new = use_adain_new
        if not use_adain_new:
            self.freeze_plain_norm()

    @classmethod
    def from_config(cls, cfg, use_adain_new: bool = True) -> "Generator":
        g = cfg.generator
        return cls(cfg.style.n, g.depth, g.base_channels, g.max_channels, use_adain_new)

    def freeze_plain_norm(self) -> None:
        """Baseline ablation: every AdaIN-new site becomes a frozen plain instance norm."""
        for proj in self.decoder.projections():
            proj.plain_()
            proj.requires_grad_(False)

    def encode_content(self, x) -> ContentCode:
        return self.encoder(x)

    def decode_with_style(self, content: ContentCode, code: StyleCode) -> torch.Tensor:
        return self.decoder(content, code)

    def forward(self, x: torch.Tensor, code: StyleCode) -> torch.Tensor:
        unbatched = x.dim() == 3
        if unbatched:
            x = x.unsqueeze(0)
            code = StyleCode(code.mu.unsqueeze(0), code.sigma.unsqueeze(0))
        elif code.mu.dim() == 1:
            code = StyleCode(code.mu.expand(x.shape[0], -1), code.sigma.expand(x.shape[0], -1))
        y = self.decoder(self.encoder(x), code)
        return y[0] if unbatched else y


def translate(x: torch.Tensor, code: StyleCode, g: Generator) -> torch.Tensor:
    return g(x, code)
