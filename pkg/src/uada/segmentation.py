"""Encoder-decoder lesion segmenter with per-domain residual adapters.

Every backbone convolution ``F`` has a parallel bank of 1x1 filters ``Z_i``,
one per adapter domain ``i``; the layer output is ``F * x + Z_i * x``.
Adapters start at zero, so a fresh network is the same function for every
domain. Domain 1 is used for synthesized target images and domain 2 for real
target images.

Images of either modality enter through a modality-specific 1x1 stem that maps
their channel count to the common backbone width.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .domains import Domain

ADAPTER_DOMAINS = (1, 2)
SYNTH_DOMAIN = 1
REAL_DOMAIN = 2


def _check_domain(domain) -> int:
    if domain not in ADAPTER_DOMAINS:
        raise ValueError(f"adapter domain must be one of {ADAPTER_DOMAINS}, got {domain!r}")
    return int(domain)


def adapted_conv(x, weight, adapter, stride=1):
    """``conv(x, weight) + conv(x, adapter)`` with zero "same" padding.

    ``weight`` is ``[C_o, C_i, k, k]`` (odd k) and ``adapter`` ``[C_o, C_i, 1, 1]``.
    ``x`` is ``[C_i, H, W]`` or ``[N, C_i, H, W]``.
    """
    squeeze = x.dim() == 3
    if squeeze:
        x = x.unsqueeze(0)
    if weight.dim() != 4 or weight.shape[2] != weight.shape[3] or weight.shape[2] % 2 == 0:
        raise ValueError(f"backbone filter must be [C_o, C_i, k, k] with odd k, got {tuple(weight.shape)}")
    if tuple(adapter.shape) != (weight.shape[0], weight.shape[1], 1, 1):
        raise ValueError(f"adapter shape {tuple(adapter.shape)} does not match filter {tuple(weight.shape)}")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"input has {x.shape[1]} channels, filter expects {weight.shape[1]}")
    y = F.conv2d(x, weight, stride=stride, padding=weight.shape[2] // 2) + F.conv2d(x, adapter, stride=stride)
    return y.squeeze(0) if squeeze else y


class AdaptedConv2d(nn.Module):
    def __init__(self, cin, cout, kernel_size, stride=1, bias=False):
        super().__init__()
        self.stride = stride
        self.weight = nn.Parameter(torch.empty(cout, cin, kernel_size, kernel_size))
        nn.init.kaiming_uniform_(self.weight, a=5**0.5)
        self.bias = nn.Parameter(torch.zeros(cout)) if bias else None
        self.adapters = nn.ParameterDict(
            {str(i): nn.Parameter(torch.zeros(cout, cin, 1, 1)) for i in ADAPTER_DOMAINS}
        )

    def forward(self, x, domain):
        y = adapted_conv(x, self.weight, self.adapters[str(domain)], self.stride)
        if self.bias is not None:
            y = y + self.bias[:, None, None]
        return y


class _ConvNormAct(nn.Module):
    def __init__(self, cin, cout, k, stride=1, groups=4):
        super().__init__()
        self.conv = AdaptedConv2d(cin, cout, k, stride)
        self.norm = nn.GroupNorm(min(groups, cout), cout)

    def forward(self, x, domain):
        return F.relu(self.norm(self.conv(x, domain)))


class _ResBlock(nn.Module):
    def __init__(self, dim, k):
        super().__init__()
        self.a = _ConvNormAct(dim, dim, k)
        self.conv = AdaptedConv2d(dim, dim, k)
        self.norm = nn.GroupNorm(min(4, dim), dim)

    def forward(self, x, domain):
        return F.relu(x + self.norm(self.conv(self.a(x, domain), domain)))


@dataclass
class SegConfig:
    source_channels: int = 3
    target_channels: int = 5
    widths: tuple[int, ...] = field(default=(16, 32, 64))
    kernel_size: int = 5

    def channels(self, modality) -> int:
        modality = Domain.parse(modality)
        return self.source_channels if modality is Domain.SOURCE else self.target_channels


class Segmenter(nn.Module):
    """Residual encoder, nearest-upsampling decoder with skips, one-logit head."""

    def __init__(self, cfg: SegConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or SegConfig()
        w, k = list(cfg.widths), cfg.kernel_size
        self.stems = nn.ModuleDict({m.value: nn.Conv2d(cfg.channels(m), w[0], 1) for m in Domain})
        self.enc0 = _ConvNormAct(w[0], w[0], k)
        self.res0 = _ResBlock(w[0], k)
        self.down = nn.ModuleList(_ConvNormAct(w[i], w[i + 1], k, stride=2) for i in range(len(w) - 1))
        self.res = nn.ModuleList(_ResBlock(w[i + 1], k) for i in range(len(w) - 1))
        self.dec = nn.ModuleList(_ConvNormAct(w[i + 1] + w[i], w[i], k) for i in reversed(range(len(w) - 1)))
        self.head = AdaptedConv2d(w[0], 1, 1, bias=True)
        self._active = SYNTH_DOMAIN

    # -- parameter groups ------------------------------------------------------------

    def adapter_parameters(self, domain=None):
        keys = [str(_check_domain(domain))] if domain is not None else [str(i) for i in ADAPTER_DOMAINS]
        for m in self.modules():
            if isinstance(m, AdaptedConv2d):
                for key in keys:
                    yield m.adapters[key]

    def stem_parameters(self, modality=None):
        mods = [Domain.parse(modality).value] if modality is not None else list(self.stems)
        for m in mods:
            yield from self.stems[m].parameters()

    def backbone_parameters(self):
        skip = {id(p) for p in self.adapter_parameters()} | {id(p) for p in self.stem_parameters()}
        return [p for p in self.parameters() if id(p) not in skip]

    def adapter_ratio(self, per_domain=True) -> float:
        n_adapt = sum(p.numel() for p in self.adapter_parameters(SYNTH_DOMAIN if per_domain else None))
        return n_adapt / sum(p.numel() for p in self.backbone_parameters())

    # -- domain selection ------------------------------------------------------------

    def set_active_domain(self, domain) -> None:
        self._active = _check_domain(domain)

    @property
    def active_domain(self) -> int:
        return self._active

    def _modality(self, x, modality):
        if modality is not None:
            modality = Domain.parse(modality)
            if x.shape[1] != self.cfg.channels(modality):
                raise ValueError(f"{modality.value} images need {self.cfg.channels(modality)} channels")
            return modality
        if x.shape[1] == self.cfg.target_channels:
            return Domain.TARGET
        if x.shape[1] == self.cfg.source_channels:
            return Domain.SOURCE
        raise ValueError(f"no input stem for {x.shape[1]}-channel images")

    def logits(self, image, domain=None, modality=None):
        d = self._active if domain is None else _check_domain(domain)
        squeeze = image.dim() == 3
        x = image.unsqueeze(0) if squeeze else image
        h = self.stems[self._modality(x, modality).value](x)
        h = self.res0(self.enc0(h, d), d)
        skips = [h]
        for down, res in zip(self.down, self.res):
            h = res(down(h, d), d)
            skips.append(h)
        skips.pop()
        for dec in self.dec:
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = dec(torch.cat([h, skips.pop()], dim=1), d)
        out = self.head(h, d)[:, 0]
        return out[0] if squeeze else out

    def segment(self, image, domain=None, modality=None):
        """Lesion probability map ``[H, W]`` (or ``[N, H, W]`` for a batch)."""
        return torch.sigmoid(self.logits(image, domain, modality))

    forward = segment
