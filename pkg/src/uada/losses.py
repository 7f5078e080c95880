"""Objective terms for joint translation + segmentation training.

All functions are pure and differentiable. Expectations are batch means and
L1 norms are per-element means, so the weights do not depend on image size.
The source-side and target-side variants of each translation term come from
a single implementation parameterized by the direction of translation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import torch

from .domains import Domain
from .errors import PoisonedLossError
from .segmentation import REAL_DOMAIN, SYNTH_DOMAIN

DICE_EPS = 1e-7

PAIRED_TERMS = ("gan", "recon", "content", "style", "cyc")
TERM_NAMES = tuple(f"{t}_{d}" for t in PAIRED_TERMS for d in ("s", "t")) + ("seg_synth",)


@dataclass
class LossWeights:
    lambda_gan: float = 1.0
    lambda_x: float = 10.0
    lambda_c: float = 1.0
    lambda_s: float = 1.0
    lambda_cyc: float = 10.0
    lambda_seg: float = 1.0  # the synthesized-image segmentation term enters unweighted by default

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{f.name} must be finite and non-negative, got {v}")

    def for_term(self, name: str) -> float:
        if name == "seg_synth":
            return self.lambda_seg
        prefix = name.rsplit("_", 1)[0]
        return {
            "gan": self.lambda_gan,
            "recon": self.lambda_x,
            "content": self.lambda_c,
            "style": self.lambda_s,
            "cyc": self.lambda_cyc,
        }[prefix]


@dataclass
class LossReport:
    """Named term values plus their weighted total.

    ``total`` keeps the autograd graph; ``values`` holds detached floats.
    """

    terms: dict = field(default_factory=dict)
    total: torch.Tensor | None = None

    @property
    def values(self) -> dict:
        out = {k: float(v) for k, v in self.terms.items()}
        out["total"] = float(self.total) if self.total is not None else float("nan")
        return out


def l1(a, b):
    return (a - b).abs().mean()


def dice_loss(pred, target, per_image: bool = False, eps: float = DICE_EPS):
    """Negative soft dice, pooled over the whole batch.

    ``-2 sum(p*y) / (sum(p^2) + sum(y^2) + eps)``. With ``per_image`` the ratio
    is taken per leading-axis item and averaged instead.
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    target = target.to(pred.dtype)
    if per_image:
        dims = tuple(range(1, pred.dim()))
        num = (pred * target).sum(dim=dims)
        den = (pred * pred).sum(dim=dims) + (target * target).sum(dim=dims)
        return (-2 * num / (den + eps)).mean()
    return -2 * (pred * target).sum() / ((pred * pred).sum() + (target * target).sum() + eps)


def _nonempty(batch):
    return batch is not None and len(batch[0]) > 0


def seg_objective(seg, real_batch=None, synth_batch=None, per_image=False):
    """Dice on labeled real target images (adapter domain 2) plus dice on
    synthesized images with source masks (adapter domain 1).

    Each batch is an ``(images, masks)`` pair; either may be empty or None.
    """
    if not _nonempty(real_batch) and not _nonempty(synth_batch):
        raise ValueError("segmentation objective needs at least one non-empty batch")
    total = 0.0
    if _nonempty(real_batch):
        x, y = real_batch
        total = total + dice_loss(seg.segment(x, REAL_DOMAIN), y, per_image)
    if _nonempty(synth_batch):
        x, y = synth_batch
        total = total + dice_loss(seg.segment(x, SYNTH_DOMAIN), y, per_image)
    return total


def gan_value(real_scores, fake_scores):
    """The adversarial objective ``E[log D(real)] + E[log(1 - D(fake))]``.

    The discriminator maximizes it; scores must already be in (0, 1).
    """
    return torch.log(real_scores).mean() + torch.log1p(-fake_scores).mean()


def gan_loss_discriminator(real_scores, fake_scores):
    return -gan_value(real_scores, fake_scores)


def gan_loss_generator(fake_scores, non_saturating: bool = False):
    if non_saturating:
        return -torch.log(fake_scores).mean()
    return torch.log1p(-fake_scores).mean()


# ---------------------------------------------------------------------------
# Translation terms. ``src`` is the domain of the input image; every term is
# defined once and instantiated for both directions.


def self_recon_loss(net, x, domain):
    domain = Domain.parse(domain)
    rec = net.decode(net.encode_content(x, domain), net.encode_style(x, domain), domain)
    return l1(rec, x)


def content_recon_loss(net, x, style, src=Domain.SOURCE):
    """Content of the translated image re-encoded in the other domain vs the original content."""
    src = Domain.parse(src)
    c = net.encode_content(x, src)
    fake = net.decode(c, style, src.other)
    return l1(net.encode_content(fake, src.other), c)


def style_recon_loss(net, x, style, src=Domain.SOURCE):
    """Style re-encoded from the translated image vs the sampled style."""
    src = Domain.parse(src)
    fake = net.decode(net.encode_content(x, src), style, src.other)
    return l1(net.encode_style(fake, src.other), style)


def cycle_loss(net, x, style, src=Domain.SOURCE):
    """Translate with ``style``, translate back with the input's own style code."""
    src = Domain.parse(src)
    fake = net.decode(net.encode_content(x, src), style, src.other)
    back = net.decode(net.encode_content(fake, src.other), net.encode_style(x, src), src)
    return l1(back, x)


def seg_synth_loss(seg, net, x_src, y_src, styles, detach_generator=False, per_image=False):
    """Dice of the segmenter (adapter domain 1) on source images translated to the target domain."""
    if len(x_src) == 0:
        raise ValueError("synthesized segmentation loss needs a non-empty batch")
    fake = net.translate(x_src, Domain.SOURCE, Domain.TARGET, styles)
    if detach_generator:
        fake = fake.detach()
    return dice_loss(seg.segment(fake, SYNTH_DOMAIN), y_src, per_image)


@dataclass
class DirectionTerms:
    """Intermediate tensors of one translation direction, shared between terms."""

    gan: torch.Tensor
    recon: torch.Tensor
    content: torch.Tensor
    style: torch.Tensor
    cyc: torch.Tensor
    fake: torch.Tensor


def direction_terms(net, x, style, src, non_saturating=False, use_style=True):
    """All generator-side terms for translating ``x`` from ``src`` to the other domain.

    Computes each network pass once. With ``use_style=False`` every style code is
    the zero vector (deterministic one-to-one translation) and the style term is 0.
    """
    src = Domain.parse(src)
    dst = src.other
    c = net.encode_content(x, src)
    s_own = net.encode_style(x, src) if use_style else torch.zeros_like(style)
    if not use_style:
        style = torch.zeros_like(style)

    recon = l1(net.decode(c, s_own, src), x)
    fake = net.decode(c, style, dst)
    c_fake = net.encode_content(fake, dst)
    content = l1(c_fake, c)
    style_term = l1(net.encode_style(fake, dst), style) if use_style else fake.new_zeros(())
    cyc = l1(net.decode(c_fake, s_own, src), x)
    gan = gan_loss_generator(net.discriminate(fake, dst), non_saturating)
    return DirectionTerms(gan=gan, recon=recon, content=content, style=style_term, cyc=cyc, fake=fake)


def total_objective(terms: dict, weights: LossWeights) -> LossReport:
    """Weighted sum of the paired translation terms plus the synthesized-image dice term.

    ``terms`` maps names from ``TERM_NAMES`` to scalars; missing names count as 0.
    """
    unknown = set(terms) - set(TERM_NAMES)
    if unknown:
        raise KeyError(f"unknown loss terms: {sorted(unknown)}")
    total = None
    for name in TERM_NAMES:
        if name not in terms:
            continue
        v = terms[name]
        vt = v if torch.is_tensor(v) else torch.tensor(float(v), dtype=torch.float64)
        if not bool(torch.isfinite(vt.detach()).all()):
            raise PoisonedLossError(name)
        contrib = weights.for_term(name) * vt
        total = contrib if total is None else total + contrib
    if total is None:
        total = torch.zeros((), dtype=torch.float64)
    return LossReport(terms=dict(terms), total=total)
