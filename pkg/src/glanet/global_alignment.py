"""Gaussian style-code alignment: reparameterized sampling, likelihood and KL terms.

Both the literal sign conventions and the stable (minimizable) ones are provided.
``paper_literal`` likelihood is the log-likelihood of the target sample under the
source Gaussian (to be maximized); ``nll`` is its negation. ``paper_literal``
regularization is the negated KL; ``standard`` is the KL itself.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .config import ConfigError
from .style_encoder import StyleCode

CLAMP = 1e6
LIKELIHOOD_MODES = ("paper_literal", "nll")
REGULARIZATION_MODES = ("paper_literal", "standard")


@dataclass
class GaussianPair:
    source: StyleCode
    target: StyleCode

    def __post_init__(self):
        if self.source.n != self.target.n:
            raise ConfigError(f"source N={self.source.n} and target N={self.target.n} differ")


def sample_reparam(code: StyleCode, noise: torch.Tensor) -> torch.Tensor:
    if noise.shape[-1] != code.n:
        raise ConfigError(f"noise length {noise.shape[-1]} does not match N={code.n}")
    return code.mu + code.sigma * noise


def _batch_mean(v: torch.Tensor) -> torch.Tensor:
    return v.mean() if v.dim() else v


def likelihood_loss(pair: GaussianPair, noise: torch.Tensor, mode: str = "nll") -> torch.Tensor:
    if mode not in LIKELIHOOD_MODES:
        raise ConfigError(f"unknown likelihood mode {mode!r}")
    s = sample_reparam(pair.target, noise)
    ll = -(((s - pair.source.mu) ** 2) / (2 * pair.source.sigma**2)).sum(-1)
    val = ll if mode == "paper_literal" else -ll
    return _batch_mean(val.clamp(-CLAMP, CLAMP))


def kl_unit_to_gauss(code: StyleCode) -> torch.Tensor:
    """Closed-form KL(N(0, 1) || N(mu, sigma^2)), summed over dimensions."""
    mu, sigma = code.mu, code.sigma
    return (torch.log(sigma) + (1 + mu**2) / (2 * sigma**2) - 0.5).sum(-1)


def regularization_loss(code: StyleCode, mode: str = "standard") -> torch.Tensor:
    if mode == "paper_literal":
        val = -kl_unit_to_gauss(code)
    elif mode == "standard":
        val = kl_unit_to_gauss(code)
    else:
        raise ConfigError(f"unknown regularization mode {mode!r}")
    return _batch_mean(val.clamp(-CLAMP, CLAMP))


def global_loss(
    pair: GaussianPair,
    noise: torch.Tensor,
    lambda_l: float = 1.0,
    lambda_r: float = 1.0,
    likelihood_mode: str = "nll",
    regularization_mode: str = "standard",
) -> torch.Tensor:
    """Weighted sum of the likelihood term and the KL term on the source code."""
    return lambda_l * likelihood_loss(pair, noise, likelihood_mode) + lambda_r * regularization_loss(
        pair.source, regularization_mode
    )
