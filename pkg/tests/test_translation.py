import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from uada.domains import Domain
from uada.translation import Translator, TranslatorConfig, adain

from .conftest import SMALL_TRANSLATOR


@pytest.fixture(scope="module")
def net():
    torch.manual_seed(0)
    return Translator().eval()


def test_content_code_shape_and_determinism(net):
    x = torch.randn(3, 64, 64)
    c = net.encode_content(x, Domain.SOURCE)
    assert c.shape == (64, 16, 16)
    assert torch.equal(c, net.encode_content(x, "source"))


def test_zero_image_codes_are_finite(net):
    for dom, ch in ((Domain.SOURCE, 3), (Domain.TARGET, 5)):
        z = torch.zeros(ch, 64, 64)
        c, s = net.encode_content(z, dom), net.encode_style(z, dom)
        assert torch.isfinite(c).all() and torch.isfinite(s).all()
        assert torch.equal(c, net.encode_content(z, dom))
        assert torch.equal(s, net.encode_style(z, dom))


def test_channel_mismatch_rejected(net):
    with pytest.raises(ValueError):
        net.encode_content(torch.randn(5, 64, 64), Domain.SOURCE)
    with pytest.raises(ValueError):
        net.encode_style(torch.randn(3, 64, 64), Domain.TARGET)
    with pytest.raises(ValueError):
        net.discriminate(torch.randn(3, 64, 64), Domain.TARGET)


def test_style_code_shape(net):
    assert net.encode_style(torch.randn(5, 64, 64), Domain.TARGET).shape == (8,)


def test_style_encoder_nearly_shift_invariant(net):
    # periodic test image, shifted circularly by 2 pixels
    t = torch.arange(64) * 2 * np.pi / 16
    img = torch.stack([torch.sin(t)[:, None] * torch.cos(k * t)[None, :] for k in range(1, 6)]).float()
    s0 = net.encode_style(img, Domain.TARGET)
    s1 = net.encode_style(torch.roll(img, shifts=(2, 2), dims=(1, 2)), Domain.TARGET)
    assert (s0 - s1).abs().max() < 0.1


def test_sample_style_distribution(net):
    g = torch.Generator().manual_seed(4)
    a = net.sample_style(generator=torch.Generator().manual_seed(4))
    b = net.sample_style(generator=torch.Generator().manual_seed(4))
    c = net.sample_style(generator=torch.Generator().manual_seed(5))
    assert torch.equal(a, b) and not torch.equal(a, c)
    big = net.sample_style(10_000, g).double()
    assert big.shape == (10_000, 8)
    assert (big.mean(0).abs() < 0.05).all()
    assert ((big.var(0) > 0.9) & (big.var(0) < 1.1)).all()


def test_adain_worked_example():
    x = torch.tensor([[[1.0, 2.0], [3.0, 4.0]]], dtype=torch.float64)
    out = adain(x, torch.tensor([2.0], dtype=torch.float64), torch.tensor([1.0], dtype=torch.float64))
    # mean 2.5, biased variance 1.25
    expected = [2 * (v - 2.5) / np.sqrt(1.25 + 1e-5) + 1 for v in (1, 2, 3, 4)]
    np.testing.assert_allclose(out.flatten().numpy(), expected, rtol=1e-12)
    np.testing.assert_allclose(expected, [-1.6833, 0.1056, 1.8944, 3.6833], atol=1e-4)


def test_adain_plain_instance_norm():
    x = torch.randn(4, 8, 8, dtype=torch.float64) * 3 + 2
    out = adain(x, torch.ones(4, dtype=torch.float64), torch.zeros(4, dtype=torch.float64))
    np.testing.assert_allclose(out.mean(dim=(1, 2)).numpy(), 0, atol=1e-12)
    np.testing.assert_allclose(out.std(dim=(1, 2), unbiased=False).numpy(), 1, atol=1e-5)


def test_adain_constant_channel():
    x = torch.full((1, 4, 4), 5.0)
    out = adain(x, torch.tensor([2.0]), torch.tensor([3.0]))
    np.testing.assert_allclose(out.numpy(), 3.0, atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(-3, 3), min_size=3, max_size=3),
    st.lists(st.floats(-3, 3), min_size=3, max_size=3),
    st.integers(0, 2**31 - 1),
)
def test_adain_statistics_property(gamma, beta, seed):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(3, 6, 6, generator=g, dtype=torch.float64) * 4
    gamma_t = torch.tensor(gamma, dtype=torch.float64)
    beta_t = torch.tensor(beta, dtype=torch.float64)
    out = adain(x, gamma_t, beta_t)
    np.testing.assert_allclose(out.mean(dim=(1, 2)).numpy(), beta, atol=1e-5)
    np.testing.assert_allclose(out.std(dim=(1, 2), unbiased=False).numpy(), np.abs(gamma), atol=1e-4)


def test_decode_shape_and_determinism(net):
    c = torch.randn(64, 16, 16)
    s = torch.randn(8)
    y = net.decode(c, s, Domain.TARGET)
    assert y.shape == (5, 64, 64)
    assert torch.equal(y, net.decode(c, s, Domain.TARGET))
    assert net.decode(c, s, Domain.SOURCE).shape == (3, 64, 64)


def test_decode_shape_errors(net):
    with pytest.raises(ValueError):
        net.decode(torch.randn(32, 16, 16), torch.randn(8), Domain.TARGET)
    with pytest.raises(ValueError):
        net.decode(torch.randn(64, 16, 16), torch.randn(7), Domain.TARGET)


@pytest.mark.parametrize("seed", range(5))
def test_style_changes_output(seed):
    torch.manual_seed(100 + seed)
    net = Translator(SMALL_TRANSLATOR)
    c = torch.randn(1, net.cfg.content_dim, 8, 8)
    a = net.decode(c, torch.randn(1, 8), Domain.TARGET)
    b = net.decode(c, torch.randn(1, 8), Domain.TARGET)
    assert (a - b).abs().mean() > 0


def test_style_pathway_liveness():
    torch.manual_seed(1)
    net = Translator(SMALL_TRANSLATOR).double()
    c = torch.randn(1, net.cfg.content_dim, 8, 8, dtype=torch.float64)
    s = torch.randn(1, 8, dtype=torch.float64)
    base = net.decode(c, s, Domain.TARGET)
    for k in range(8):
        ds = torch.zeros_like(s)
        ds[0, k] = 1e-3
        assert (net.decode(c, s + ds, Domain.TARGET) - base).abs().mean() > 0


def test_translate_is_decode_of_content(net):
    x = torch.randn(3, 64, 64)
    s = torch.randn(8)
    assert torch.equal(net.translate(x, "source", "target", s),
                       net.decode(net.encode_content(x, "source"), s, "target"))
    with pytest.raises(ValueError):
        net.translate(x, "source", "source", s)


def test_encode_decode_roundtrip_shapes():
    cfg = TranslatorConfig(base_width=4, n_res=1, mlp_dim=8, disc_width=4, style_downsample=2)
    net = Translator(cfg)
    for size in (32, 48, 64):
        x = torch.randn(2, 3, size, size)
        y = net.translate(x, Domain.SOURCE, Domain.TARGET, torch.randn(2, 8))
        assert y.shape == (2, 5, size, size)
        assert torch.isfinite(y).all()


def test_discriminator_scores(net):
    x = torch.randn(5, 64, 64)
    d = net.discriminate(x, Domain.TARGET)
    assert d.shape == (1, 4, 4)
    assert ((d > 0) & (d < 1)).all()
    assert torch.equal(d, net.discriminate(x, Domain.TARGET))
    huge = net.discriminate(x * 1e6, Domain.TARGET)
    assert (huge >= 1e-7).all() and (huge <= 1 - 1e-7).all()
    assert torch.isfinite(torch.log(huge)).all() and torch.isfinite(torch.log1p(-huge)).all()
