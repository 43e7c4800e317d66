"""Fréchet distance, KID and density/coverage over extracted features."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .local_alignment import make_extractor

NEG_EIG_TOL = 1e-6


class MetricError(ValueError):
    pass


@dataclass
class FeatureStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    @classmethod
    def from_features(cls, feats) -> "FeatureStats":
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] < 2:
            raise MetricError(f"need at least 2 feature vectors, got shape {feats.shape}")
        cov = np.cov(feats, rowvar=False).reshape(feats.shape[1], feats.shape[1])
        return cls(feats.mean(axis=0), (cov + cov.T) / 2, feats.shape[0])


def _psd_sqrt(m: np.ndarray, what: str) -> np.ndarray:
    m = (m + m.T) / 2
    w, v = np.linalg.eigh(m)
    scale = max(1.0, float(np.abs(w).max(initial=0.0)))
    if w.min(initial=0.0) < -NEG_EIG_TOL * scale:
        raise MetricError(
            f"{what} is not positive semi-definite: min eigenvalue {w.min():.3e}, "
            f"condition ~{np.abs(w).max() / max(np.abs(w).min(), 1e-300):.3e}"
        )
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    """||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2}).

    tr((S_a S_b)^{1/2}) is taken as tr((S_a^{1/2} S_b S_a^{1/2})^{1/2}), which is
    symmetric and so admits an eigendecomposition.
    """
    if a.mean.shape != b.mean.shape:
        raise MetricError(f"dimension mismatch: {a.mean.shape} vs {b.mean.shape}")
    diff = a.mean - b.mean
    sa = _psd_sqrt(a.cov, "covariance a")
    inner = _psd_sqrt(sa @ b.cov @ sa, "covariance product")
    return float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2 * np.trace(inner))


def polynomial_kernel(x: np.ndarray, y: np.ndarray, degree: int = 3) -> np.ndarray:
    return (x @ y.T / x.shape[1] + 1.0) ** degree


def kid(a, b, degree: int = 3, exclude_cross_diagonal: bool = False) -> float:
    """Unbiased MMD^2 with the polynomial kernel (x.y/d + 1)^degree.

    ``exclude_cross_diagonal`` drops i == j from the cross term too (needs equal
    sizes); with b == a the estimate is then exactly zero.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    m, n = len(a), len(b)
    if m < 2 or n < 2:
        raise MetricError(f"KID needs at least 2 points per set, got {m} and {n}")
    if a.shape[1] != b.shape[1]:
        raise MetricError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    kaa = polynomial_kernel(a, a, degree)
    kbb = polynomial_kernel(b, b, degree)
    kab = polynomial_kernel(a, b, degree)
    within_a = (kaa.sum() - np.trace(kaa)) / (m * (m - 1))
    within_b = (kbb.sum() - np.trace(kbb)) / (n * (n - 1))
    if exclude_cross_diagonal:
        if m != n:
            raise MetricError("diagonal-excluded cross term needs equal set sizes")
        cross = (kab.sum() - np.trace(kab)) / (m * (m - 1))
    else:
        cross = kab.sum() / (m * n)
    return float(within_a + within_b - 2 * cross)


def _pairwise(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.sqrt(((x[:, None, :] - y[None, :, :]) ** 2).sum(-1))


def density_coverage(real, fake, k: int = 5) -> tuple[float, float]:
    real = np.asarray(real, dtype=np.float64)
    fake = np.asarray(fake, dtype=np.float64)
    if len(real) <= k:
        raise MetricError(f"density/coverage needs more than k={k} real points, got {len(real)}")
    if len(fake) < 1:
        raise MetricError("no fake points")
    # k-th nearest neighbour excluding the point itself (index 0 after sorting)
    radii = np.sort(_pairwise(real, real), axis=1)[:, k]
    d_rf = _pairwise(real, fake)
    inside = d_rf < radii[:, None]
    density = inside.sum() / (k * len(fake))
    coverage = inside.any(axis=1).mean()
    return float(density), float(coverage)


# --------------------------------------------------------------------------- run evaluation


def pooled_features(images: torch.Tensor, extractor, batch: int = 16) -> np.ndarray:
    """Spatially averaged features of every tap, concatenated per image."""
    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch):
            stack = extractor(images[i : i + batch].float())
            out.append(torch.cat([f.mean(dim=(-2, -1)) for f in stack.features], dim=1))
    return torch.cat(out).double().numpy()


def evaluate_run(translated, target, extractor=None, seed: int = 0, k: int = 5, degree: int = 3) -> dict:
    if extractor is None:
        extractor = make_extractor("random", seed=seed)
    ft = pooled_features(translated.stack(), extractor)
    fr = pooled_features(target.stack(), extractor)
    density, coverage = density_coverage(fr, ft, k=min(k, len(fr) - 1))
    return {
        "frechet_distance": frechet_distance(FeatureStats.from_features(ft), FeatureStats.from_features(fr)),
        "kid": kid(ft, fr, degree),
        "density": density,
        "coverage": coverage,
        "extractor": getattr(extractor, "identity", type(extractor).__name__),
        "seed": seed,
        "k": min(k, len(fr) - 1),
        "n_translated": len(ft),
        "n_target": len(fr),
    }


def format_report(report: dict) -> str:
    lines = [f"extractor: {report['extractor']}  seed: {report['seed']}  "
             f"n_translated={report['n_translated']}  n_target={report['n_target']}"]
    lines.append(f"{'metric':<18}{'value':>14}")
    for name, label in (("frechet_distance", "frechet"), ("kid", "kid (raw)"),
                        ("density", "density"), ("coverage", "coverage")):
        lines.append(f"{label:<18}{report[name]:>14.6f}")
    return "\n".join(lines)


def write_report(report: dict, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    (out / "metrics.txt").write_text(format_report(report) + "\n")
