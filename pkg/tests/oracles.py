"""Independent reference routines used by the tests (finite differences, brute-force loops)."""

import math

import torch


def fd_rel_error(fn, tensor, eps=1e-6, max_entries=None, seed=0, floor=1e-6):
    """Norm-wise relative error between autograd and central differences of ``fn`` w.r.t. ``tensor``.

    ``fn`` maps nothing to a float64 scalar and must read ``tensor`` in place.
    Only ``max_entries`` randomly chosen coordinates are probed when given.
    ``floor`` bounds the denominator so identically-zero gradients compare cleanly.
    """
    tensor.grad = None
    out = fn()
    (auto,) = torch.autograd.grad(out, tensor, allow_unused=True)
    if auto is None:
        auto = torch.zeros_like(tensor)
    flat = tensor.data.view(-1)
    idx = range(flat.numel())
    if max_entries is not None and flat.numel() > max_entries:
        g = torch.Generator().manual_seed(seed)
        idx = torch.randperm(flat.numel(), generator=g)[:max_entries].tolist()
    a, n = [], []
    with torch.no_grad():
        for i in idx:
            orig = flat[i].item()
            flat[i] = orig + eps
            up = fn().item()
            flat[i] = orig - eps
            down = fn().item()
            flat[i] = orig
            n.append((up - down) / (2 * eps))
            a.append(auto.view(-1)[i].item())
    a, n = torch.tensor(a, dtype=torch.float64), torch.tensor(n, dtype=torch.float64)
    scale = max(a.norm().item(), n.norm().item(), floor)
    return (a - n).norm().item() / scale


def conv2d_loops(x, w, b, stride, pad):
    """Direct convolution: x [C,H,W], w [O,C,k,k] -> [O,H',W'] as nested Python sums."""
    c, h, wd = x.shape
    o, _, k, _ = w.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = [[[0.0] * wo for _ in range(ho)] for _ in range(o)]
    for oc in range(o):
        for i in range(ho):
            for j in range(wo):
                s = float(b[oc])
                for ic in range(c):
                    for di in range(k):
                        for dj in range(k):
                            r, q = i * stride - pad + di, j * stride - pad + dj
                            if 0 <= r < h and 0 <= q < wd:
                                s += float(w[oc, ic, di, dj]) * float(x[ic, r, q])
                out[oc][i][j] = s
    return torch.tensor(out, dtype=torch.float64)


def kid_triple_sum(a, b, degree=3, exclude_cross_diagonal=False):
    d = len(a[0])

    def k(u, v):
        return (sum(ui * vi for ui, vi in zip(u, v)) / d + 1.0) ** degree

    m, n = len(a), len(b)
    saa = sum(k(a[i], a[j]) for i in range(m) for j in range(m) if i != j)
    sbb = sum(k(b[i], b[j]) for i in range(n) for j in range(n) if i != j)
    if exclude_cross_diagonal:
        sab = sum(k(a[i], b[j]) for i in range(m) for j in range(n) if i != j) / (m * (m - 1))
    else:
        sab = sum(k(a[i], b[j]) for i in range(m) for j in range(n)) / (m * n)
    return saa / (m * (m - 1)) + sbb / (n * (n - 1)) - 2 * sab


def density_coverage_loops(real, fake, k):
    real = [list(map(float, r)) for r in real]
    fake = [list(map(float, f)) for f in fake]
    radii = []
    for i, r in enumerate(real):
        ds = sorted(math.dist(r, s) for j, s in enumerate(real) if j != i)
        radii.append(ds[k - 1])
    hits = 0
    covered = 0
    for i, r in enumerate(real):
        any_inside = False
        for f in fake:
            if math.dist(r, f) < radii[i]:
                hits += 1
                any_inside = True
        covered += any_inside
    return hits / (k * len(fake)), covered / len(real)
