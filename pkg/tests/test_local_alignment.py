import itertools
import logging

import pytest
import torch
from hypothesis import given, strategies as st

from glanet.config import ConfigError
from glanet.local_alignment import (
    FeatureStack,
    ProviderError,
    RandomConvExtractor,
    VGG16Extractor,
    VisionTransformer,
    _VGG_LAYOUT,
    apply_attention,
    attention_map,
    extract_features,
    local_loss,
    make_extractor,
    make_provider,
    spatial_correlative_map,
)

from oracles import conv2d_loops, fd_rel_error

seeds = st.integers(0, 2**31 - 1)


# ---------------------------------------------------------------- attention


def test_constant_image_saliency_is_zero():
    a = attention_map(torch.full((3, 16, 16), 0.3), make_provider("saliency_stub"))
    assert torch.equal(a, torch.zeros(16, 16))


@given(seeds)
def test_saliency_range(seed):
    g = torch.Generator().manual_seed(seed)
    a = attention_map(torch.rand(2, 3, 16, 16, generator=g) * 2 - 1, make_provider("saliency_stub"))
    assert a.shape == (2, 16, 16)
    assert a.min() >= 0 and a.max() <= 1


def test_saliency_peaks_on_boundary():
    x = torch.full((3, 8, 8), -1.0)
    x[:, :, 4:] = 1.0
    a = attention_map(x, make_provider("saliency_stub"))
    # brute-force central differences: only columns 3 and 4 straddle the edge
    gray = x.mean(0)
    grad = torch.zeros(8, 8)
    for i in range(8):
        for j in range(8):
            left, right = gray[i, max(j - 1, 0)], gray[i, min(j + 1, 7)]
            grad[i, j] = abs(right - left) / 2
    assert set(torch.nonzero(grad == grad.max())[:, 1].tolist()) == {3, 4}
    assert set(torch.nonzero(a == 1.0)[:, 1].tolist()) == {3, 4}
    assert a[:, [0, 1, 2, 5, 6, 7]].abs().max() == 0


def test_missing_vit_weights(tmp_path):
    with pytest.raises(ProviderError, match="pretrained_vit"):
        make_provider("pretrained_vit", tmp_path / "nope.pth")
    with pytest.raises(ProviderError, match="pretrained_vit"):
        make_provider("pretrained_vit", None)


def test_unknown_provider():
    with pytest.raises(ConfigError):
        make_provider("oracle")


@pytest.fixture(scope="module")
def vit_weights(tmp_path_factory):
    torch.manual_seed(0)
    vit = VisionTransformer(patch_size=8, dim=12, depth=2, heads=6, grid=4)
    path = tmp_path_factory.mktemp("vit") / "vit.pth"
    # DINO checkpoints sometimes wrap weights under "teacher" with a "backbone." prefix
    torch.save({"teacher": {"backbone." + k: v for k, v in vit.state_dict().items()}}, path)
    return path, vit


def test_vit_provider(vit_weights):
    path, vit = vit_weights
    provider = make_provider("pretrained_vit", path)
    x = torch.rand(2, 3, 64, 64) * 2 - 1  # grid 8 != stored grid 4: positional embedding is resized
    a = attention_map(x, provider)
    assert a.shape == (2, 64, 64)
    assert a.min() >= 0 and a.max() <= 1
    assert torch.isclose(a.flatten(1).max(1).values, torch.ones(2)).all()
    assert torch.equal(a, attention_map(x, provider))


def test_vit_attention_rows_are_distributions(vit_weights):
    _, vit = vit_weights
    attn = vit.get_last_selfattention(torch.rand(1, 3, 32, 32))
    assert attn.shape == (1, 6, 17, 17)
    torch.testing.assert_close(attn.sum(-1), torch.ones(1, 6, 17))


def test_apply_attention_identities():
    x = torch.randn(3, 4, 4)
    assert torch.equal(apply_attention(x, torch.ones(4, 4)), x)
    assert torch.equal(apply_attention(x, torch.zeros(4, 4)), torch.zeros_like(x))


def test_apply_attention_per_pixel():
    x = torch.tensor([[[1.0, -2.0], [3.0, 0.5]]] * 3)
    a = torch.tensor([[0.5, 1.0], [0.0, 0.25]])
    out = apply_attention(x, a)
    for c, i, j in itertools.product(range(3), range(2), range(2)):
        assert out[c, i, j].item() == x[c, i, j].item() * a[i, j].item()


def test_apply_attention_shape_mismatch():
    with pytest.raises(ConfigError):
        apply_attention(torch.zeros(3, 4, 4), torch.zeros(3, 3))


def test_attention_is_constant_in_graph():
    a = torch.rand(4, 4, requires_grad=True)
    x = torch.rand(3, 4, 4, requires_grad=True)
    apply_attention(x, a).sum().backward()
    assert a.grad is None and x.grad is not None


# ---------------------------------------------------------------- features


def test_random_extractor_deterministic_and_strided():
    ex = make_extractor("random", seed=3)
    x = torch.rand(2, 3, 64, 64)
    a, b = extract_features(x, ex), extract_features(x, make_extractor("random", seed=3))
    assert all(torch.equal(u, v) for u, v in zip(a.features, b.features))
    assert [f.shape[-1] for f in a.features] == [32, 16, 8]


def test_random_extractor_first_tap_by_hand(f64):
    ex = RandomConvExtractor(seed=1, widths=(2, 3, 4), in_channels=1).double()
    x = torch.randn(1, 4, 4)
    tap = extract_features(x, ex).features[0][0]
    conv = ex.convs[0]
    expected = conv2d_loops(x, conv.weight, conv.bias, stride=2, pad=1).clamp_min(0)
    torch.testing.assert_close(tap, expected, rtol=0, atol=1e-12)


def test_missing_vgg_weights(tmp_path):
    with pytest.raises(ProviderError, match="vgg16"):
        make_extractor("vgg16", tmp_path / "vgg.pth")


def _random_vgg_state():
    sd, i, c_in = {}, 0, 3
    g = torch.Generator().manual_seed(0)
    for v in _VGG_LAYOUT:
        if v == "M":
            i += 1
            continue
        sd[f"features.{i}.weight"] = torch.randn(v, c_in, 3, 3, generator=g) * 0.05
        sd[f"features.{i}.bias"] = torch.zeros(v)
        i += 2
        c_in = v
    return sd


def test_vgg_extractor_taps(tmp_path):
    path = tmp_path / "vgg.pth"
    torch.save(_random_vgg_state(), path)
    stack = extract_features(torch.rand(1, 3, 32, 32), make_extractor("vgg16", path))
    assert stack.taps == ["conv2d_4", "conv2d_7", "conv2d_9"]
    assert [f.shape[1:] for f in stack.features] == [(128, 16, 16), (256, 8, 8), (512, 4, 4)]


def test_vgg_layout_matches_torchvision():
    tv = pytest.importorskip("torchvision")
    ref = {k: v.shape for k, v in tv.models.vgg16().features.state_dict().items() if int(k.split(".")[0]) <= 20}
    ours = {k[len("features."):]: v.shape for k, v in _random_vgg_state().items()}
    assert ours == ref


# ---------------------------------------------------------------- correlation


def brute_rows(f, queries, r):
    """f [C,h,w]; unit-normalize every location and take inner products over the clipped patch."""
    c, h, w = f.shape
    unit = torch.zeros_like(f)
    for i in range(h):
        for j in range(w):
            n = float(torch.sqrt(sum(f[k, i, j] ** 2 for k in range(c))))
            if n > 0:
                unit[:, i, j] = f[:, i, j] / n
    rows = []
    for qi, qj in queries:
        row = []
        for di in range(-r, r + 1):
            for dj in range(-r, r + 1):
                ki, kj = qi + di, qj + dj
                if 0 <= ki < h and 0 <= kj < w:
                    row.append(sum(float(unit[k, qi, qj]) * float(unit[k, ki, kj]) for k in range(c)))
                else:
                    row.append(0.0)
        rows.append(row)
    return torch.tensor(rows, dtype=torch.float64)


def test_self_key_is_one():
    f = torch.randn(1, 5, 6, 6, dtype=torch.float64)
    q = torch.tensor([[0, 0], [2, 3], [5, 5]])
    m = spatial_correlative_map(FeatureStack([f], ["t"]), 0, q, 2)
    center = (m.offsets == 0).all(1).nonzero()[0, 0]
    torch.testing.assert_close(m.rows[0, :, center], torch.ones(3, dtype=torch.float64), rtol=0, atol=1e-12)


def test_orthogonal_features_2x2():
    f = torch.zeros(1, 4, 2, 2, dtype=torch.float64)
    for k, (i, j) in enumerate(itertools.product(range(2), range(2))):
        f[0, k, i, j] = 1.0
    q = torch.tensor([[i, j] for i in range(2) for j in range(2)])
    m = spatial_correlative_map(FeatureStack([f], ["t"]), 0, q, 1)
    expected = brute_rows(f[0], q.tolist(), 1)
    assert torch.equal(m.rows[0], expected)
    assert set(m.rows.unique().tolist()) == {0.0, 1.0}


def test_brute_force_on_small_maps():
    g = torch.Generator().manual_seed(0)
    for h, w, r in itertools.product(range(1, 5), range(1, 5), range(0, 3)):
        f = torch.randn(1, 3, h, w, generator=g, dtype=torch.float64)
        q = torch.tensor([[i, j] for i in range(h) for j in range(w)])
        m = spatial_correlative_map(FeatureStack([f], ["t"]), 0, q, r)
        torch.testing.assert_close(m.rows[0], brute_rows(f[0], q.tolist(), r), rtol=0, atol=1e-12)
        assert m.rows.abs().max() <= 1 + 1e-12


def test_empty_or_outside_queries():
    stack = FeatureStack([torch.randn(1, 2, 4, 4)], ["t"])
    with pytest.raises(ConfigError):
        spatial_correlative_map(stack, 0, torch.zeros(0, 2, dtype=torch.long), 1)
    with pytest.raises(ConfigError):
        spatial_correlative_map(stack, 0, torch.tensor([[4, 0]]), 1)


# ---------------------------------------------------------------- local loss


@pytest.fixture(scope="module")
def extractor():
    return make_extractor("random", seed=0)


def test_identical_images_zero_loss(extractor):
    x = torch.rand(2, 3, 32, 32) * 2 - 1
    a = attention_map(x, make_provider("saliency_stub"))
    loss = local_loss(x, x.clone(), a, extractor, 64, 2, torch.Generator().manual_seed(0))
    assert loss.item() == 0.0


@given(seeds)
def test_loss_bounds(seed):
    g = torch.Generator().manual_seed(seed)
    ex = make_extractor("random", seed=0)
    x = torch.rand(1, 3, 16, 16, generator=g) * 2 - 1
    y = torch.rand(1, 3, 16, 16, generator=g) * 2 - 1
    a = torch.rand(1, 16, 16, generator=g)
    val = local_loss(x, y, a, ex, 32, 2, g).item()
    assert 0.0 <= val <= 2.0


def test_loss_gradient_wrt_output(f64):
    ex = RandomConvExtractor(seed=0, widths=(4, 4, 4)).double()
    g = torch.Generator().manual_seed(1)
    x = torch.rand(1, 3, 8, 8, generator=g) * 2 - 1
    y = (torch.rand(1, 3, 8, 8, generator=g) * 2 - 1).requires_grad_(True)
    a = attention_map(x, make_provider("saliency_stub"))
    fn = lambda: local_loss(x, y, a, ex, 16, 1, torch.Generator().manual_seed(5))  # noqa: E731
    assert fd_rel_error(fn, y) < 1e-3


class _Scaled:
    """Wraps an extractor and rescales one image's features by a positive per-location factor."""

    def __init__(self, inner, factor):
        self.inner, self.factor, self.calls = inner, factor, 0

    def __call__(self, img):
        stack = self.inner(img)
        self.calls += 1
        if self.calls == 2:
            stack = FeatureStack([f * self.factor(f) for f in stack.features], stack.taps)
        return stack


def test_invariant_to_positive_feature_scaling(extractor):
    g = torch.Generator().manual_seed(2)
    x = torch.rand(1, 3, 32, 32, generator=g) * 2 - 1
    y = torch.rand(1, 3, 32, 32, generator=g) * 2 - 1
    a = torch.rand(1, 32, 32, generator=g)
    base = local_loss(x, y, a, extractor, 64, 2, torch.Generator().manual_seed(9))
    for factor in (lambda f: 3.7, lambda f: torch.rand(f.shape[0], 1, *f.shape[2:], generator=g) + 0.1):
        scaled = local_loss(x, y, a, _Scaled(extractor, factor), 64, 2, torch.Generator().manual_seed(9))
        torch.testing.assert_close(scaled, base, rtol=1e-5, atol=1e-6)


def test_all_zero_rows_warn(caplog):
    zero = lambda img: FeatureStack([torch.zeros(img.shape[0], 2, 4, 4)], ["t"])  # noqa: E731
    x = torch.rand(1, 3, 8, 8)
    with caplog.at_level(logging.WARNING):
        val = local_loss(x, x + 0.1, torch.ones(1, 8, 8), zero, 4, 1)
    assert val.item() == 0.0
    assert "zero norm" in caplog.text


def test_recompute_attention_mode(extractor):
    x = torch.rand(1, 3, 16, 16)
    y = torch.rand(1, 3, 16, 16)
    p = make_provider("saliency_stub")
    val = local_loss(x, y, attention_map(x, p), extractor, 16, 1, torch.Generator().manual_seed(0), provider=p)
    assert 0 <= val.item() <= 2


def test_layer_reduction_sum(extractor):
    x = torch.rand(1, 3, 16, 16)
    y = torch.rand(1, 3, 16, 16)
    a = torch.ones(1, 16, 16)
    mean = local_loss(x, y, a, extractor, 16, 1, torch.Generator().manual_seed(0))
    total = local_loss(x, y, a, extractor, 16, 1, torch.Generator().manual_seed(0), layer_reduction="sum")
    torch.testing.assert_close(total, mean * 3)


def test_shape_mismatch(extractor):
    with pytest.raises(ConfigError):
        local_loss(torch.rand(1, 3, 8, 8), torch.rand(1, 3, 16, 16), torch.ones(1, 8, 8), extractor)
