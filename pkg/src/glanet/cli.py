"""Command-line entry point: synth-data, train, translate, eval, inspect-attention."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import torch
from PIL import Image

from . import config as config_mod
from .config import ConfigError, RunConfig
from .data import DataError, DomainDataset, SyntheticSpec, dump_png, generate_synthetic, load_folder, to_image, to_tensor
from .local_alignment import ProviderError, attention_map, make_extractor, make_provider
from .metrics import MetricError, evaluate_run, format_report, write_report
from .trainer import TrainingAborted, fit, infer_with_state, latest_checkpoint, load_checkpoint, state_from_checkpoint

log = logging.getLogger("glanet")

OUTPUT_ROOT_ENV = "GLANET_OUTPUT_ROOT"
SENTINEL = "INCOMPLETE"
USER_ERRORS = (ConfigError, DataError, ProviderError, MetricError, FileNotFoundError, OSError)


def resolve_out(path: str) -> Path:
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


def _datasets(cfg: RunConfig) -> tuple[DomainDataset, DomainDataset]:
    d = cfg.data
    if d.source_dir or d.target_dir:
        if not (d.source_dir and d.target_dir):
            raise ConfigError("data.source_dir and data.target_dir must be set together")
        return (load_folder(d.source_dir, d.resolution, d.seed, "source"),
                load_folder(d.target_dir, d.resolution, d.seed, "target"))
    return generate_synthetic(SyntheticSpec(d.resolution, d.synthetic_count, d.motif, d.seed, cfg.style.patch_size))


def cmd_synth_data(cfg: RunConfig, args, out: Path) -> None:
    d = cfg.data
    src, tgt = generate_synthetic(SyntheticSpec(d.resolution, d.synthetic_count, d.motif, d.seed, cfg.style.patch_size))
    dump_png(src, out / "source")
    dump_png(tgt, out / "target")
    print(f"wrote {len(src)} source and {len(tgt)} target images to {out}")


def cmd_train(cfg: RunConfig, args, out: Path) -> None:
    src, tgt = _datasets(cfg)
    resume = load_checkpoint(args.resume) if args.resume else None
    every = max(1, args.log_every)

    def show(r):
        if r["step"] % every == 0:
            print(f"step {r['step']:>6}  d={r['d_loss']:.4f}  g_gan={r['g_gan']:.4f}  "
                  f"global={r['global']:.4f}  local={r['local']:.4f}  total={r['total_g']:.4f}")

    result = fit(src, tgt, cfg, out_dir=out, resume=resume, on_step=show)
    print(f"trained to step {result.checkpoint.step}; checkpoints in {out / 'checkpoints'}")


def _load_ckpt(path: str):
    p = Path(path)
    return load_checkpoint(latest_checkpoint(p) if p.is_dir() else p)


def cmd_translate(cfg: RunConfig, args, out: Path) -> None:
    state = state_from_checkpoint(_load_ckpt(args.checkpoint))
    res = state.cfg.data.resolution
    data = load_folder(args.input, res, 0, "source")
    style = "running_mean"
    if args.style != "running_mean":
        with Image.open(args.style) as img:
            style = to_tensor(img, res)
    out.mkdir(parents=True, exist_ok=True)
    for sample in data.samples:
        y = infer_with_state(sample.pixels, state, style)
        to_image(y).save(out / (Path(sample.source_path).stem + ".png"))
    print(f"translated {len(data)} images into {out}")


def cmd_eval(cfg: RunConfig, args, out: Path) -> None:
    res = cfg.data.resolution
    translated = load_folder(args.translated, res, 0, "source")
    target = load_folder(args.target, res, 0, "target")
    m = cfg.metrics
    extractor = make_extractor(m.extractor, m.extractor_weights, m.seed)
    report = evaluate_run(translated, target, extractor, seed=m.seed, k=m.k, degree=m.kid_degree)
    write_report(report, out)
    print(format_report(report))


def _overlay(x: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
    heat = torch.stack([a * 2 - 1, -torch.ones_like(a), (1 - a) * 2 - 1])
    return torch.cat([x, 0.5 * x + 0.5 * heat], dim=-1)


def cmd_inspect_attention(cfg: RunConfig, args, out: Path) -> None:
    data = load_folder(args.input, cfg.data.resolution, 0, "source")
    provider = make_provider(cfg.local.provider, cfg.local.provider_weights)
    out.mkdir(parents=True, exist_ok=True)
    for sample in data.samples:
        a = attention_map(sample.pixels, provider)
        to_image(_overlay(sample.pixels, a)).save(out / (Path(sample.source_path).stem + "_attention.png"))
    print(f"wrote {len(data)} attention overlays to {out}")


COMMANDS = {
    "synth-data": cmd_synth_data,
    "train": cmd_train,
    "translate": cmd_translate,
    "eval": cmd_eval,
    "inspect-attention": cmd_inspect_attention,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="glanet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="INI config file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
        p.add_argument("--out", required=True, help=f"output directory (relative paths honor ${OUTPUT_ROOT_ENV})")
        return p

    common(sub.add_parser("synth-data", help="write the synthetic two-domain corpus as PNGs"))
    p = common(sub.add_parser("train", help="train and write checkpoints, loss log and sample grids"))
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--log-every", type=int, default=10)
    p = common(sub.add_parser("translate", help="translate a folder of images with a checkpoint"))
    p.add_argument("--checkpoint", required=True, help="checkpoint file or training output directory")
    p.add_argument("--input", required=True)
    p.add_argument("--style", default="running_mean", help="'running_mean' or a target image path")
    p = common(sub.add_parser("eval", help="Fréchet / KID / density & coverage between two folders"))
    p.add_argument("--translated", required=True)
    p.add_argument("--target", required=True)
    p = common(sub.add_parser("inspect-attention", help="write attention-map overlays"))
    p.add_argument("--input", required=True)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    out = resolve_out(args.out)
    try:
        cfg = config_mod.load_config(args.config, args.overrides)
        out.mkdir(parents=True, exist_ok=True)
        sentinel = out / SENTINEL
        sentinel.write_text(f"{args.command} did not finish\n")
        config_mod.save_config(cfg, out / "config.ini")
        COMMANDS[args.command](cfg, args, out)
        sentinel.unlink()
        return 0
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except TrainingAborted as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        msg = str(exc).splitlines()[0] if str(exc) else ""
        print(f"internal error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
