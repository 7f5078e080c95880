"""Stochastic image-to-image translation network.

Per-domain content encoders map images into a shared spatial content space,
per-domain style encoders map them to a small style vector with a standard
normal prior, and per-domain generators decode (content, style) pairs, the
style entering only through AdaIN parameters produced by an MLP. Patch
discriminators score realism in each domain.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .domains import Domain

ADAIN_EPS = 1e-5
SCORE_CLAMP = 1e-7


@dataclass
class TranslatorConfig:
    source_channels: int = 3
    target_channels: int = 5
    base_width: int = 16  # width after the stem; doubles at each downsample
    n_downsample: int = 2
    n_res: int = 3
    style_dim: int = 8
    mlp_dim: int = 64
    disc_width: int = 16
    disc_layers: int = 4
    style_downsample: int = 4
    stem_kernel: int = 7  # also used for the generator output conv

    @property
    def content_dim(self) -> int:
        return self.base_width * 2**self.n_downsample

    def channels(self, domain) -> int:
        domain = Domain.parse(domain)
        return self.source_channels if domain is Domain.SOURCE else self.target_channels


def adain(features, gamma, beta, eps: float = ADAIN_EPS):
    """Adaptive instance normalization.

    ``features`` is ``[C, H, W]`` or ``[N, C, H, W]``; ``gamma`` and ``beta``
    are ``[C]`` or ``[N, C]``. Each channel is normalized with its own mean and
    (biased) variance, then scaled by ``gamma`` and shifted by ``beta``.
    """
    squeeze = features.dim() == 3
    if squeeze:
        features = features.unsqueeze(0)
    if gamma.dim() == 1:
        gamma = gamma.unsqueeze(0)
    if beta.dim() == 1:
        beta = beta.unsqueeze(0)
    mean = features.mean(dim=(2, 3), keepdim=True)
    var = features.var(dim=(2, 3), keepdim=True, unbiased=False)
    out = (features - mean) / torch.sqrt(var + eps)
    out = gamma[:, :, None, None] * out + beta[:, :, None, None]
    return out.squeeze(0) if squeeze else out


def _conv(cin, cout, k, stride=1):
    # odd k: "same" size; k=4, stride 2: exact halving
    return nn.Sequential(nn.ReflectionPad2d((k - 1) // 2), nn.Conv2d(cin, cout, k, stride))


class ResBlock(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.conv1 = _conv(dim, dim, 3)
        self.conv2 = _conv(dim, dim, 3)
        self.norm1 = nn.InstanceNorm2d(dim, affine=False)
        self.norm2 = nn.InstanceNorm2d(dim, affine=False)

    def forward(self, x):
        h = F.relu(self.norm1(self.conv1(x)))
        return x + self.norm2(self.conv2(h))


class AdaINResBlock(nn.Module):
    """Residual block whose two normalizations take (gamma, beta) from the style MLP."""

    n_params_per_block = 4  # gamma1, beta1, gamma2, beta2

    def __init__(self, dim):
        super().__init__()
        self.dim = dim
        self.conv1 = _conv(dim, dim, 3)
        self.conv2 = _conv(dim, dim, 3)

    def forward(self, x, params):
        g1, b1, g2, b2 = params
        h = F.relu(adain(self.conv1(x), g1, b1))
        return x + adain(self.conv2(h), g2, b2)


class ContentEncoder(nn.Module):
    def __init__(self, in_channels, cfg: TranslatorConfig):
        super().__init__()
        w = cfg.base_width
        layers = [_conv(in_channels, w, cfg.stem_kernel), nn.InstanceNorm2d(w), nn.ReLU()]
        for _ in range(cfg.n_downsample):
            layers += [_conv(w, 2 * w, 4, stride=2), nn.InstanceNorm2d(2 * w), nn.ReLU()]
            w *= 2
        layers += [ResBlock(w) for _ in range(cfg.n_res)]
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        return self.model(x)


class StyleEncoder(nn.Module):
    def __init__(self, in_channels, cfg: TranslatorConfig):
        super().__init__()
        w = cfg.base_width
        layers = [_conv(in_channels, w, cfg.stem_kernel), nn.ReLU()]
        for _ in range(cfg.style_downsample):
            nxt = min(2 * w, cfg.content_dim)
            layers += [_conv(w, nxt, 4, stride=2), nn.ReLU()]
            w = nxt
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(w, cfg.style_dim)

    def forward(self, x):
        h = self.features(x).mean(dim=(2, 3))  # exact global mean pooling
        return self.head(h)


class Generator(nn.Module):
    def __init__(self, out_channels, cfg: TranslatorConfig):
        super().__init__()
        dim = cfg.content_dim
        self.blocks = nn.ModuleList(AdaINResBlock(dim) for _ in range(cfg.n_res))
        self.n_adain = cfg.n_res * AdaINResBlock.n_params_per_block * dim
        self.mlp = nn.Sequential(
            nn.Linear(cfg.style_dim, cfg.mlp_dim),
            nn.ReLU(),
            nn.Linear(cfg.mlp_dim, cfg.mlp_dim),
            nn.ReLU(),
            nn.Linear(cfg.mlp_dim, self.n_adain),
        )
        ups = []
        for _ in range(cfg.n_downsample):
            ups += [
                nn.Upsample(scale_factor=2, mode="nearest"),
                _conv(dim, dim // 2, 5),
                nn.GroupNorm(1, dim // 2),
                nn.ReLU(),
            ]
            dim //= 2
        self.up = nn.Sequential(*ups)
        self.out = _conv(dim, out_channels, cfg.stem_kernel)
        self.dim = cfg.content_dim

    def adain_params(self, style):
        p = self.mlp(style)  # [N, n_adain]
        chunks = p.split(self.dim, dim=1)
        out = []
        for i in range(0, len(chunks), 4):
            g1, b1, g2, b2 = chunks[i : i + 4]
            # gamma centred at 1 so an all-zero style still passes features through
            out.append((1 + g1, b1, 1 + g2, b2))
        return out

    def forward(self, content, style):
        h = content
        for block, params in zip(self.blocks, self.adain_params(style)):
            h = block(h, params)
        return self.out(self.up(h))


class PatchDiscriminator(nn.Module):
    """Strided conv stack; returns raw logits of shape [N, 1, H/2^L, W/2^L]."""

    def __init__(self, in_channels, cfg: TranslatorConfig):
        super().__init__()
        layers = []
        w_in, w = in_channels, cfg.disc_width
        for _ in range(cfg.disc_layers - 1):
            layers += [nn.Conv2d(w_in, w, 4, 2, 1), nn.LeakyReLU(0.2)]
            w_in, w = w, 2 * w
        layers += [nn.Conv2d(w_in, 1, 4, 2, 1)]
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        return self.model(x)


def _batched(image):
    if image.dim() == 3:
        return image.unsqueeze(0), True
    if image.dim() != 4:
        raise ValueError(f"expected [C,H,W] or [N,C,H,W] image, got shape {tuple(image.shape)}")
    return image, False


class Translator(nn.Module):
    """Both translation directions plus discriminators, keyed by :class:`Domain`."""

    def __init__(self, cfg: TranslatorConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or TranslatorConfig()
        doms = [d.value for d in Domain]
        self.content_enc = nn.ModuleDict({d: ContentEncoder(cfg.channels(d), cfg) for d in doms})
        self.style_enc = nn.ModuleDict({d: StyleEncoder(cfg.channels(d), cfg) for d in doms})
        self.gen = nn.ModuleDict({d: Generator(cfg.channels(d), cfg) for d in doms})
        self.disc = nn.ModuleDict({d: PatchDiscriminator(cfg.channels(d), cfg) for d in doms})

    def generator_parameters(self):
        for name in ("content_enc", "style_enc", "gen"):
            yield from getattr(self, name).parameters()

    def discriminator_parameters(self):
        return self.disc.parameters()

    def _check(self, image, domain):
        domain = Domain.parse(domain)
        x, squeeze = _batched(image)
        want = self.cfg.channels(domain)
        if x.shape[1] != want:
            raise ValueError(f"{domain.value} images need {want} channels, got {x.shape[1]}")
        return x, squeeze, domain

    def encode_content(self, image, domain):
        x, squeeze, domain = self._check(image, domain)
        c = self.content_enc[domain.value](x)
        return c.squeeze(0) if squeeze else c

    def encode_style(self, image, domain):
        x, squeeze, domain = self._check(image, domain)
        s = self.style_enc[domain.value](x)
        return s.squeeze(0) if squeeze else s

    def sample_style(self, n=None, generator: torch.Generator | None = None, dtype=None):
        """Standard-normal style codes: ``[style_dim]`` or ``[n, style_dim]``."""
        shape = (self.cfg.style_dim,) if n is None else (n, self.cfg.style_dim)
        dtype = dtype or next(self.parameters()).dtype
        return torch.randn(shape, generator=generator, dtype=dtype)

    def decode(self, content, style, domain):
        domain = Domain.parse(domain)
        c, squeeze = _batched(content)
        s = style.unsqueeze(0) if style.dim() == 1 else style
        if c.shape[1] != self.cfg.content_dim:
            raise ValueError(f"content code needs {self.cfg.content_dim} channels, got {c.shape[1]}")
        if s.shape[-1] != self.cfg.style_dim:
            raise ValueError(f"style code needs length {self.cfg.style_dim}, got {s.shape[-1]}")
        if s.shape[0] == 1 and c.shape[0] > 1:
            s = s.expand(c.shape[0], -1)
        if s.shape[0] != c.shape[0]:
            raise ValueError(f"batch mismatch: {c.shape[0]} content codes, {s.shape[0]} styles")
        out = self.gen[domain.value](c, s)
        return out.squeeze(0) if squeeze else out

    def translate(self, image, from_domain, to_domain, style):
        from_domain, to_domain = Domain.parse(from_domain), Domain.parse(to_domain)
        if from_domain is to_domain:
            raise ValueError("translation needs two different domains")
        return self.decode(self.encode_content(image, from_domain), style, to_domain)

    def discriminate_logits(self, image, domain):
        x, squeeze, domain = self._check(image, domain)
        out = self.disc[domain.value](x)
        return out.squeeze(0) if squeeze else out

    def discriminate(self, image, domain):
        """Realism scores in ``[1e-7, 1 - 1e-7]`` so log-losses stay finite."""
        return torch.sigmoid(self.discriminate_logits(image, domain)).clamp(SCORE_CLAMP, 1 - SCORE_CLAMP)
