"""Analytic gradients of every loss term against central finite differences in float64."""

import contextlib

import pytest
import torch
import torch.nn.functional as F

from uada.domains import Domain
from uada.losses import (
    content_recon_loss,
    cycle_loss,
    dice_loss,
    direction_terms,
    gan_loss_discriminator,
    gan_loss_generator,
    seg_objective,
    seg_synth_loss,
    self_recon_loss,
    style_recon_loss,
    total_objective,
    LossWeights,
)
from uada.segmentation import Segmenter
from uada.translation import Translator

from .conftest import TOY_SEG, TOY_TRANSLATOR

H = 1e-3
TOL = 1e-4
MIN_KEPT = 0.2  # deep compositions of |.| and ReLU cross many kinks at h=1e-3
MIN_KEPT_COUNT = 100


class KinkRecorder:
    """Records which side of every non-differentiable point each activation lies on.

    Central differences are only meaningful when both stencil points lie on the
    same smooth piece. Coordinates whose +h and -h evaluations land on different
    pieces of a ReLU, LeakyReLU, |.| or clamp are reported as kink crossings.
    """

    def __init__(self):
        self.record = None

    def _note(self, *masks):
        if self.record is not None:
            self.record.extend(m.detach().clone() for m in masks)

    @contextlib.contextmanager
    def active(self):
        relu, leaky, tabs, tclamp = F.relu, F.leaky_relu, torch.Tensor.abs, torch.Tensor.clamp
        rec = self

        def relu_(x, *a, **k):
            rec._note(x > 0)
            return relu(x, *a, **k)

        def leaky_(x, *a, **k):
            rec._note(x > 0)
            return leaky(x, *a, **k)

        def abs_(x):
            rec._note(x > 0)
            return tabs(x)

        def clamp_(x, lo=None, hi=None):
            rec._note(x < lo, x > hi)
            return tclamp(x, lo, hi)

        F.relu, F.leaky_relu, torch.Tensor.abs, torch.Tensor.clamp = relu_, leaky_, abs_, clamp_
        try:
            yield self
        finally:
            F.relu, F.leaky_relu, torch.Tensor.abs, torch.Tensor.clamp = relu, leaky, tabs, tclamp

    def evaluate(self, fn):
        self.record = []
        value = fn().item()
        pattern, self.record = self.record, None
        return value, pattern


def _same(a, b):
    return len(a) == len(b) and all(torch.equal(x, y) for x, y in zip(a, b))


def finite_difference_error(loss_fn, params):
    """Norm-wise relative error between autograd and central differences over ``params``.

    Returns ``(error, kept_fraction)``; coordinates whose stencil crosses a kink are excluded.
    """
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    analytic = torch.cat([
        (g if g is not None else torch.zeros_like(p)).reshape(-1) for g, p in zip(grads, params)
    ])
    numeric, keep = [], []
    rec = KinkRecorder()
    with torch.no_grad(), rec.active():
        for p in params:
            flat = p.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + H
                up, pat_up = rec.evaluate(loss_fn)
                flat[i] = orig - H
                down, pat_down = rec.evaluate(loss_fn)
                flat[i] = orig
                numeric.append((up - down) / (2 * H))
                keep.append(_same(pat_up, pat_down))
    numeric = torch.tensor(numeric, dtype=torch.float64)
    keep = torch.tensor(keep)
    a, n = analytic[keep], numeric[keep]
    scale = max(n.norm().item(), a.norm().item())
    assert scale > 0, "gradient is identically zero; the check would be vacuous"
    return (a - n).norm().item() / scale, keep.double().mean().item()


@pytest.fixture
def nets():
    torch.manual_seed(11)
    net = Translator(TOY_TRANSLATOR).double()
    seg = Segmenter(TOY_SEG).double()
    # break the zero initialization so adapter paths carry signal
    with torch.no_grad():
        for p in seg.adapter_parameters():
            p.normal_(0, 0.1)
    g = torch.Generator().manual_seed(5)
    x_s = torch.randn(2, 1, 8, 8, generator=g, dtype=torch.float64)
    x_t = torch.randn(2, 1, 8, 8, generator=g, dtype=torch.float64)
    y = (torch.rand(2, 8, 8, generator=g) > 0.5).double()
    style = torch.randn(2, TOY_TRANSLATOR.style_dim, generator=g, dtype=torch.float64)
    return net, seg, x_s, x_t, y, style


def _params(*modules):
    return [p for m in modules for p in m.parameters()]


def _check(name, fn, params):
    err, kept = finite_difference_error(fn, params)
    n = sum(p.numel() for p in params)
    print(f"{name}: {n} params, {kept:.0%} kink-free, relative error {err:.2e}")
    assert kept >= MIN_KEPT, f"{name}: only {kept:.0%} of coordinates are kink-free"
    assert kept * n >= min(MIN_KEPT_COUNT, n)
    assert err <= TOL, f"{name}: {err:.3e}"


def test_toy_subnetworks_are_small():
    net, seg = Translator(TOY_TRANSLATOR), Segmenter(TOY_SEG)
    for d in ("source", "target"):
        for mod in (net.content_enc[d], net.style_enc[d], net.gen[d], net.disc[d]):
            assert sum(p.numel() for p in mod.parameters()) <= 1000
    assert sum(p.numel() for p in seg.parameters()) <= 1000


def test_dice_gradient():
    g = torch.Generator().manual_seed(0)
    pred = torch.rand(3, 5, generator=g, dtype=torch.float64).requires_grad_()
    target = (torch.rand(3, 5, generator=g) > 0.5).double()
    _check("dice", lambda: dice_loss(pred, target), [pred])
    _check("dice per image", lambda: dice_loss(pred, target, per_image=True), [pred])


def test_seg_objective_gradient(nets):
    net, seg, x_s, x_t, y, style = nets
    fn = lambda: seg_objective(seg, (x_t, y), (x_s, y))
    _check("seg objective", fn, _params(seg))


@pytest.mark.parametrize("src", ["source", "target"])
def test_discriminator_gan_gradient(nets, src):
    net, seg, x_s, x_t, y, style = nets
    src = Domain(src)
    x = x_s if src is Domain.SOURCE else x_t
    real = x_t if src is Domain.SOURCE else x_s
    with torch.no_grad():
        fake = net.translate(x, src, src.other, style)
    fn = lambda: gan_loss_discriminator(net.discriminate(real, src.other), net.discriminate(fake, src.other))
    _check(f"gan discriminator {src.value}", fn, _params(net.disc[src.other.value]))


@pytest.mark.parametrize("non_saturating", [False, True])
def test_generator_gan_gradient(nets, non_saturating):
    net, seg, x_s, x_t, y, style = nets
    fn = lambda: gan_loss_generator(
        net.discriminate(net.translate(x_s, "source", "target", style), "target"), non_saturating
    )
    _check("gan generator", fn, _params(net.gen["target"]))


@pytest.mark.parametrize("src", ["source", "target"])
def test_self_recon_gradient(nets, src):
    net, seg, x_s, x_t, y, style = nets
    x = x_s if src == "source" else x_t
    fn = lambda: self_recon_loss(net, x, src)
    _check(f"recon {src}", fn, _params(net.gen[src], net.style_enc[src]))
    _check(f"recon {src} content", fn, _params(net.content_enc[src]))


@pytest.mark.parametrize("src", ["source", "target"])
def test_content_recon_gradient(nets, src):
    net, seg, x_s, x_t, y, style = nets
    x = x_s if src == "source" else x_t
    other = Domain(src).other.value
    fn = lambda: content_recon_loss(net, x, style, src)
    _check(f"content {src}", fn, _params(net.gen[other], net.content_enc[other]))


@pytest.mark.parametrize("src", ["source", "target"])
def test_style_recon_gradient(nets, src):
    net, seg, x_s, x_t, y, style = nets
    x = x_s if src == "source" else x_t
    other = Domain(src).other.value
    fn = lambda: style_recon_loss(net, x, style, src)
    _check(f"style {src}", fn, _params(net.gen[other], net.style_enc[other]))


@pytest.mark.parametrize("src", ["source", "target"])
def test_cycle_gradient(nets, src):
    net, seg, x_s, x_t, y, style = nets
    x = x_s if src == "source" else x_t
    fn = lambda: cycle_loss(net, x, style, src)
    _check(f"cycle {src}", fn, _params(net.gen[src], net.gen[Domain(src).other.value]))


def test_seg_synth_gradient_generator(nets):
    net, seg, x_s, x_t, y, style = nets
    fn = lambda: seg_synth_loss(seg, net, x_s, y, style)
    _check("seg synth generator", fn, _params(net.gen["target"]))
    _check("seg synth segmenter", fn, _params(seg))


def test_seg_synth_detach_zeroes_generator_gradient(nets):
    net, seg, x_s, x_t, y, style = nets
    params = _params(net.gen["target"], net.content_enc["source"])
    live = torch.autograd.grad(seg_synth_loss(seg, net, x_s, y, style), params, allow_unused=True)
    assert any(g is not None and g.abs().sum() > 0 for g in live)
    loss = seg_synth_loss(seg, net, x_s, y, style, detach_generator=True)
    dead = torch.autograd.grad(loss, params, allow_unused=True)
    assert all(g is None or g.abs().sum() == 0 for g in dead)


def test_total_objective_gradient(nets):
    net, seg, x_s, x_t, y, style = nets

    def fn():
        a = direction_terms(net, x_s, style, "source")
        b = direction_terms(net, x_t, style, "target")
        terms = {
            "gan_t": a.gan, "recon_s": a.recon, "content_s": a.content, "style_t": a.style, "cyc_s": a.cyc,
            "gan_s": b.gan, "recon_t": b.recon, "content_t": b.content, "style_s": b.style, "cyc_t": b.cyc,
            "seg_synth": seg_synth_loss(seg, net, x_s, y, style),
        }
        return total_objective(terms, LossWeights()).total

    _check("total generators", fn, _params(net.gen["source"], net.gen["target"]))
    _check("total segmenter", fn, _params(seg))
