"""Training loop for the full objective, checkpoints and inference-time style handling."""

from __future__ import annotations

import json
import logging
import math
import os
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
from torch import nn

from . import config as config_mod
from .config import ConfigError, RunConfig
from .data import DomainDataset, ImageSample, draw_target_index, to_image
from .discriminator import PatchDiscriminator, d_loss, g_loss
from .generator import Generator
from .global_alignment import GaussianPair, global_loss
from .local_alignment import attention_map, local_loss, make_extractor, make_provider
from .style_encoder import StyleCode, StyleEncoder

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


class TrainingAborted(RuntimeError):
    """A loss term became non-finite."""


class GLANet(nn.Module):
    def __init__(self, cfg: RunConfig):
        super().__init__()
        self.style_encoder = StyleEncoder.from_config(cfg.style, cfg.data.resolution)
        self.generator = Generator.from_config(cfg, use_adain_new=cfg.trainer.use_adain_new)
        self.discriminator = PatchDiscriminator.from_config(cfg)


@dataclass
class TrainState:
    cfg: RunConfig
    model: GLANet
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    step: int = 0
    running_mu: Optional[torch.Tensor] = None
    running_sigma: Optional[torch.Tensor] = None
    provider: object = None
    extractor: object = None

    def generator_params(self):
        return [p for p in (*self.model.generator.parameters(), *self.model.style_encoder.parameters())
                if p.requires_grad]


def init_state(cfg: RunConfig) -> TrainState:
    cfg.validate()
    t = cfg.trainer
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(t.seed)
        model = GLANet(cfg)
    g_params = [p for p in (*model.generator.parameters(), *model.style_encoder.parameters()) if p.requires_grad]
    opt_g = torch.optim.Adam(g_params, lr=t.lr, betas=(t.beta1, t.beta2))
    opt_d = torch.optim.Adam(model.discriminator.parameters(), lr=t.lr, betas=(t.beta1, t.beta2))
    return TrainState(
        cfg, model, opt_g, opt_d,
        provider=make_provider(cfg.local.provider, cfg.local.provider_weights),
        extractor=make_extractor(cfg.local.extractor, cfg.local.extractor_weights, cfg.local.extractor_seed),
    )


def step_generator(seed: int, step: int) -> torch.Generator:
    """Per-step RNG for noise and query sampling; a pure function of (seed, step)."""
    s = int(np.random.SeedSequence([seed, 2, step]).generate_state(1, dtype=np.uint64)[0])
    return torch.Generator().manual_seed(s)


def neutral_code(n: int, batch: int, dtype=torch.float32) -> StyleCode:
    return StyleCode(torch.zeros(batch, n, dtype=dtype), torch.ones(batch, n, dtype=dtype))


def _check_finite(name: str, value: torch.Tensor, step: int) -> None:
    if not torch.isfinite(value).all():
        raise TrainingAborted(f"non-finite {name} loss at step {step}: {value.item()}")


def train_step(state: TrainState, x: torch.Tensor, y: torch.Tensor) -> dict:
    """One D update on the detached output, then one joint generator + style encoder update."""
    cfg, m = state.cfg, state.model
    t, gl, lc = cfg.trainer, cfg.global_, cfg.local
    t0 = time.perf_counter()
    step = state.step + 1
    gen = step_generator(t.seed, step)
    if x.dim() == 3:
        x, y = x.unsqueeze(0), y.unsqueeze(0)

    need_global = t.use_global and t.lambda_global > 0
    need_local = t.use_local and t.lambda_local > 0
    z_y = m.style_encoder(y, "target") if (t.use_adain_new or need_global) else None
    z_x = m.style_encoder(x, "source") if need_global else None
    code = z_y if t.use_adain_new else neutral_code(cfg.style.n, x.shape[0], x.dtype)
    y_hat = m.generator(x, code)

    # (1) discriminator
    state.opt_d.zero_grad(set_to_none=True)
    ld = d_loss(m.discriminator(y), m.discriminator(y_hat.detach()))
    _check_finite("discriminator", ld, step)
    ld.backward()
    state.opt_d.step()

    # (2) generator + style encoder
    m.discriminator.requires_grad_(False)
    try:
        l_gan = g_loss(m.discriminator(y_hat), cfg.gan.g_mode)
    finally:
        m.discriminator.requires_grad_(True)
    zero = y_hat.new_zeros(())
    l_global = zero
    if need_global:
        noise = torch.randn(z_y.mu.shape, generator=gen, dtype=z_y.mu.dtype)
        l_global = global_loss(GaussianPair(z_x, z_y), noise, gl.lambda_l, gl.lambda_r,
                               gl.likelihood_mode, gl.regularization_mode)
    l_local = zero
    if need_local:
        a = attention_map(x, state.provider)
        l_local = local_loss(x, y_hat, a, state.extractor, lc.num_queries, lc.patch_radius, gen,
                             lc.layer_reduction, state.provider if lc.recompute_attention else None)
    for name, v in (("adversarial", l_gan), ("global", l_global), ("local", l_local)):
        _check_finite(name, v, step)
    total = l_gan + t.lambda_global * l_global + t.lambda_local * l_local
    _check_finite("total generator", total, step)
    state.opt_g.zero_grad(set_to_none=True)
    total.backward()
    state.opt_g.step()

    if z_y is not None:
        mu, sigma = z_y.mu.detach().mean(0), z_y.sigma.detach().mean(0)
        if state.running_mu is None:
            state.running_mu, state.running_sigma = mu.clone(), sigma.clone()
        else:
            k = t.running_momentum
            state.running_mu = k * state.running_mu + (1 - k) * mu
            state.running_sigma = k * state.running_sigma + (1 - k) * sigma
    state.step = step
    return {
        "step": step,
        "d_loss": ld.item(),
        "g_gan": l_gan.item(),
        "global": l_global.item(),
        "local": l_local.item(),
        "total_g": total.item(),
        "lambda_global": t.lambda_global,
        "lambda_local": t.lambda_local,
        "wall_time": time.perf_counter() - t0,
    }


# --------------------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    params: dict
    optim_g: dict
    optim_d: dict
    step: int
    running_mu: Optional[torch.Tensor]
    running_sigma: Optional[torch.Tensor]
    config: dict
    format_version: int = FORMAT_VERSION

    @property
    def cfg(self) -> RunConfig:
        return config_mod.from_dict(self.config)


def make_checkpoint(state: TrainState) -> Checkpoint:
    clone = lambda v: None if v is None else v.clone()  # noqa: E731
    return Checkpoint(
        params={k: v.clone() for k, v in state.model.state_dict().items()},
        optim_g=state.opt_g.state_dict(),
        optim_d=state.opt_d.state_dict(),
        step=state.step,
        running_mu=clone(state.running_mu),
        running_sigma=clone(state.running_sigma),
        config=config_mod.to_dict(state.cfg),
    )


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """Atomic write: temp file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": ckpt.format_version,
        "params": ckpt.params,
        "optim_g": ckpt.optim_g,
        "optim_d": ckpt.optim_d,
        "step": ckpt.step,
        "running_mu": ckpt.running_mu,
        "running_sigma": ckpt.running_sigma,
        "config": ckpt.config,
    }
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    os.close(fd)
    try:
        torch.save(payload, tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
    return path


def load_checkpoint(path) -> Checkpoint:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise ConfigError(f"unsupported checkpoint format version {version!r}")
    return Checkpoint(**payload)


def state_from_checkpoint(ckpt: Checkpoint) -> TrainState:
    state = init_state(ckpt.cfg)
    state.model.load_state_dict(ckpt.params)
    state.opt_g.load_state_dict(ckpt.optim_g)
    state.opt_d.load_state_dict(ckpt.optim_d)
    state.step = ckpt.step
    state.running_mu, state.running_sigma = ckpt.running_mu, ckpt.running_sigma
    return state


def latest_checkpoint(run_dir) -> Path:
    ckpts = sorted(Path(run_dir).glob("checkpoints/*.pt"), key=lambda p: torch.load(
        p, map_location="cpu", weights_only=True)["step"])
    if not ckpts:
        raise FileNotFoundError(f"no checkpoints under {run_dir}")
    return ckpts[-1]


# --------------------------------------------------------------------------- fit / infer


def sample_grid(x: torch.Tensor, a: torch.Tensor, y_hat: torch.Tensor) -> torch.Tensor:
    """Input | attention | output, side by side, as one [3, H, 3W] image."""
    att = (a * 2 - 1).unsqueeze(0).expand(3, -1, -1)
    return torch.cat([x, att, y_hat], dim=-1)


@dataclass
class FitResult:
    checkpoint: Checkpoint
    history: list[dict] = field(default_factory=list)


def total_steps(cfg: RunConfig, n_source: int) -> int:
    if cfg.trainer.max_steps is not None:
        return cfg.trainer.max_steps
    return cfg.trainer.epochs * math.ceil(n_source / cfg.trainer.batch_size)


def fit(
    source: DomainDataset,
    target: DomainDataset,
    cfg: RunConfig,
    out_dir=None,
    resume: Optional[Checkpoint] = None,
    on_step: Optional[Callable[[dict], None]] = None,
) -> FitResult:
    """Adam training over seeded unpaired pairs; per-epoch checkpoints and periodic sample grids.

    Source order per epoch comes from the source dataset seed; the paired target
    index for each step is drawn from (trainer seed, step).
    """
    state = state_from_checkpoint(resume) if resume is not None else init_state(cfg)
    cfg = state.cfg
    t = cfg.trainer
    bsz = t.batch_size
    per_epoch = math.ceil(len(source) / bsz)
    last = total_steps(cfg, len(source))
    out = Path(out_dir) if out_dir is not None else None
    log_f = None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        (out / "samples").mkdir(exist_ok=True)
        log_f = open(out / "history.jsonl", "a")
    history = []
    try:
        while state.step < last:
            epoch, pos = divmod(state.step, per_epoch)
            idx = source.order(epoch)[pos * bsz : (pos + 1) * bsz]
            tidx = draw_target_index(t.seed, state.step + 1, len(target), len(idx))
            x, y = source.stack(idx), target.stack(tidx)
            report = train_step(state, x, y)
            report["epoch"] = epoch
            history.append(report)
            if on_step is not None:
                on_step(report)
            if log_f is not None:
                log_f.write(json.dumps(report) + "\n")
                log_f.flush()
                if t.sample_every and state.step % t.sample_every == 0:
                    _save_sample(state, x[0], out / "samples" / f"step_{state.step:06d}.png")
                if pos == per_epoch - 1:
                    save_checkpoint(make_checkpoint(state), out / "checkpoints" / f"epoch_{epoch + 1:04d}.pt")
                elif state.step == last:
                    save_checkpoint(make_checkpoint(state), out / "checkpoints" / f"step_{state.step:06d}.pt")
    finally:
        if log_f is not None:
            log_f.close()
    return FitResult(make_checkpoint(state), history)


def _save_sample(state: TrainState, x: torch.Tensor, path: Path) -> None:
    with torch.no_grad():
        a = attention_map(x, state.provider)
        y_hat = infer_with_state(x, state)
    to_image(sample_grid(x, a, y_hat)).save(path)


def style_code_for(state: TrainState, style, batch: int) -> StyleCode:
    n = state.cfg.style.n
    if not state.cfg.trainer.use_adain_new:
        return neutral_code(n, batch)
    if isinstance(style, str):
        if style != "running_mean":
            raise ConfigError(f"unknown style source {style!r}")
        if state.running_mu is None:
            raise ConfigError("running-mean style code requested but never populated")
        return StyleCode(state.running_mu.expand(batch, -1), state.running_sigma.expand(batch, -1))
    y = style.pixels if isinstance(style, ImageSample) else style
    code = state.model.style_encoder(y if y.dim() == 4 else y.unsqueeze(0), "target")
    if code.mu.shape[0] != batch:
        code = StyleCode(code.mu.expand(batch, -1), code.sigma.expand(batch, -1))
    return code


@torch.no_grad()
def infer_with_state(x: torch.Tensor, state: TrainState, style="running_mean") -> torch.Tensor:
    unbatched = x.dim() == 3
    xb = x.unsqueeze(0) if unbatched else x
    y = state.model.generator(xb, style_code_for(state, style, xb.shape[0]))
    return y[0] if unbatched else y


def infer(x: torch.Tensor, ckpt: Checkpoint, style="running_mean") -> torch.Tensor:
    """Translate ``x`` with the stored running-mean target code or the code of image ``style``."""
    return infer_with_state(x, state_from_checkpoint(ckpt), style)
