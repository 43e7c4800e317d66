"""PatchGAN discriminator and logit-space adversarial losses."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .config import ConfigError
from .normalization import instance_norm

G_MODES = ("saturating", "non_saturating")


class PatchDiscriminator(nn.Module):
    """``num_layers`` stride-2 4x4 conv blocks followed by a 3x3 logit head.

    Outputs raw logits, one per patch; a 64x64 input with 3 blocks gives 8x8.
    """

    def __init__(self, in_channels: int = 3, base_channels: int = 64, num_layers: int = 3):
        super().__init__()
        chans = [in_channels] + [base_channels * 2**i for i in range(num_layers)]
        self.blocks = nn.ModuleList(
            nn.Conv2d(a, b, 4, stride=2, padding=1) for a, b in zip(chans[:-1], chans[1:])
        )
        self.head = nn.Conv2d(chans[-1], 1, 3, padding=1)

    @classmethod
    def from_config(cls, cfg) -> "PatchDiscriminator":
        return cls(3, cfg.gan.base_channels, cfg.gan.num_layers)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        unbatched = img.dim() == 3
        h = img.unsqueeze(0) if unbatched else img
        for i, conv in enumerate(self.blocks):
            h = conv(h)
            if i > 0 and h.shape[-1] * h.shape[-2] >= 2:
                h = instance_norm(h)
            h = F.leaky_relu(h, 0.2)
        logits = self.head(h)[:, 0]
        return logits[0] if unbatched else logits


def discriminate(img: torch.Tensor, d: PatchDiscriminator) -> torch.Tensor:
    return d(img)


def d_loss(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    """-E[log D(y)] - E[log(1 - D(y_hat))] evaluated with log-sigmoid."""
    # log(1 - sigmoid(t)) == logsigmoid(-t)
    return -F.logsigmoid(real_logits).mean() - F.logsigmoid(-fake_logits).mean()


def g_loss(fake_logits: torch.Tensor, mode: str = "non_saturating") -> torch.Tensor:
    if mode == "saturating":
        return F.logsigmoid(-fake_logits).mean()
    if mode == "non_saturating":
        return -F.logsigmoid(fake_logits).mean()
    raise ConfigError(f"unknown generator loss mode {mode!r}; expected one of {G_MODES}")
