"""Dual awareness guidance network.

A four-scale residual encoder/decoder whose last three decoder scales are
modulated channel-wise by vectors predicted from two frozen feature encoders:
(beta, gamma) from the compression-insensitive features and (epsilon, eta)
from the compression-sensitive ones. The insensitive features are also fused
into the bottleneck by a pyramid-pooled similarity product.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoders import ResNetEncoder, feature_channels, scaled
from .errors import ChannelMismatch, LengthMismatch, ShapeMismatch, ShapeNotDivisible, UnknownVariant

BASE_WIDTHS = (64, 128, 256, 512)
BLOCKS_PER_SCALE = 4
POOL_SIZES = (1, 2, 4, 8)
PAD_MULTIPLE = 16


@dataclass(frozen=True)
class DAGNConfig:
    width_scale: float = 1.0
    use_cfm: bool = True
    ci_guidance: bool = True
    cs_guidance: bool = True
    # How a disabled guider is replaced: "literal" uses (scale, bias) = (0, 1),
    # "identity" uses (0, 0) so every guided block reduces to the identity.
    disabled_mode: str = "literal"

    def __post_init__(self):
        if self.disabled_mode not in ("literal", "identity"):
            raise ValueError(f"disabled_mode must be 'literal' or 'identity', not {self.disabled_mode!r}")

    def as_dict(self):
        return asdict(self)


VARIANTS = {
    "baseline": dict(use_cfm=False, ci_guidance=False, cs_guidance=False),
    "cigm": dict(use_cfm=False, ci_guidance=True, cs_guidance=False),
    "csgm": dict(use_cfm=False, ci_guidance=False, cs_guidance=True),
    "cfm": dict(use_cfm=True, ci_guidance=False, cs_guidance=False),
    "full": dict(use_cfm=True, ci_guidance=True, cs_guidance=True),
}


def ablation_variant(name: str, width_scale: float = 1.0, disabled_mode: str = "literal") -> DAGNConfig:
    """Network configuration for one ablation setting (baseline, cigm, csgm, cfm, full)."""
    if name not in VARIANTS:
        raise UnknownVariant(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}")
    return DAGNConfig(width_scale=width_scale, disabled_mode=disabled_mode, **VARIANTS[name])


class ResBlock(nn.Module):
    """conv3x3 -> BN -> ReLU -> conv3x3, plus identity."""

    def __init__(self, ch):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.norm = nn.BatchNorm2d(ch)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)

    def branch(self, x):
        return self.conv2(F.relu(self.norm(self.conv1(x))))

    def forward(self, x):
        return x + self.branch(x)


class GuidedBlock(ResBlock):
    """Residual block whose branch is scaled and shifted channel-wise: F + s * branch(F) + b."""

    def forward(self, x, scale, bias):
        ch = x.shape[1]
        if scale.shape[-1] != ch or bias.shape[-1] != ch:
            raise LengthMismatch(f"guidance lengths {scale.shape[-1]}/{bias.shape[-1]} != channels {ch}")
        return x + _as_map(scale) * self.branch(x) + _as_map(bias)


def _as_map(v):
    # [C] or [N, C] -> broadcastable over [N, C, H, W]
    if v.dim() == 1:
        return v.view(1, -1, 1, 1)
    return v.view(v.shape[0], -1, 1, 1)


class BaseEncoder(nn.Module):
    """Four scales of residual blocks (64/128/256/512 at full width), stride-2 2x2 convs between."""

    def __init__(self, width_scale=1.0):
        super().__init__()
        w = [scaled(c, width_scale) for c in BASE_WIDTHS]
        self.widths = w
        self.head = nn.Conv2d(3, w[0], 3, padding=1)
        self.scales = nn.ModuleList(
            nn.Sequential(*[ResBlock(c) for _ in range(BLOCKS_PER_SCALE)]) for c in w
        )
        self.downs = nn.ModuleList(nn.Conv2d(a, b, 2, stride=2) for a, b in zip(w[:-1], w[1:]))

    def forward(self, x):
        h, wd = x.shape[-2:]
        if h % 8 or wd % 8:
            raise ShapeNotDivisible(f"base encoder input {h}x{wd} must be divisible by 8")
        skips = []
        f = self.head(x)
        for i, scale in enumerate(self.scales):
            f = scale(f)
            skips.append(f)
            if i < len(self.downs):
                f = self.downs[i](f)
        return EncodedPyramid(bottleneck=f, skips=skips)


@dataclass
class EncodedPyramid:
    bottleneck: torch.Tensor
    skips: list


class Guider(nn.Module):
    """Pooled features -> shared two-layer trunk -> one (scale, bias) head per guided scale."""

    def __init__(self, in_channels, embed_dim):
        super().__init__()
        self.in_channels = in_channels
        self.lengths = [embed_dim // 2**i for i in (1, 2, 3)]
        self.trunk = nn.Sequential(
            nn.Linear(in_channels, embed_dim), nn.ReLU(inplace=True),
            nn.Linear(embed_dim, embed_dim), nn.ReLU(inplace=True),
        )
        self.heads = nn.ModuleList(nn.Linear(embed_dim, 2 * n) for n in self.lengths)

    def forward(self, f):
        if f.dim() == 3:
            f = f.unsqueeze(0)
        if f.shape[1] != self.in_channels:
            raise ChannelMismatch(f"guider expects {self.in_channels} channels, got {f.shape[1]}")
        h = self.trunk(f.mean(dim=(2, 3)))
        scales, biases = [], []
        for head, n in zip(self.heads, self.lengths):
            s, b = head(h).split(n, dim=1)
            scales.append(s)
            biases.append(b)
        return scales, biases


def pyramid_pool(x, sizes=POOL_SIZES):
    """[N, C, H, W] -> [N, C, sum(k*k)] by adaptive average pooling to each k x k grid."""
    return torch.cat([F.adaptive_avg_pool2d(x, k).flatten(2) for k in sizes], dim=2)


class CrossFeatureFusion(nn.Module):
    """out = unflatten( C3(F_bf)^T  Pool(C1(F_cif))  Pool(C2(F_cif))^T ) + F_bf."""

    def __init__(self, cif_channels, base_channels):
        super().__init__()
        self.cif_channels = cif_channels
        self.query = nn.Conv2d(base_channels, base_channels, 1)
        self.key = nn.Conv2d(cif_channels, base_channels, 1)
        self.value = nn.Conv2d(cif_channels, base_channels, 1)
        # Starting the fusion term at zero keeps the untrained product from swamping F_bf.
        nn.init.zeros_(self.query.weight)
        nn.init.zeros_(self.query.bias)

    def forward(self, f_cif, f_bf):
        if f_cif.shape[1] != self.cif_channels:
            raise ChannelMismatch(f"CFM expects {self.cif_channels} insensitive channels, got {f_cif.shape[1]}")
        n, c, h, w = f_bf.shape
        q = self.query(f_bf).flatten(2).transpose(1, 2)  # [N, HW, C]
        k = pyramid_pool(self.key(f_cif))  # [N, C, P]
        v = pyramid_pool(self.value(f_cif))  # [N, C, P]
        fused = q @ k @ v.transpose(1, 2)  # [N, HW, C]
        return fused.transpose(1, 2).reshape(n, c, h, w) + f_bf


class DAGB(nn.Module):
    """(F_in + F_skip) -> 2x transpose conv halving channels -> 4 CSG blocks -> 4 CIG blocks."""

    def __init__(self, in_ch):
        super().__init__()
        out_ch = in_ch // 2
        self.out_channels = out_ch
        self.up = nn.ConvTranspose2d(in_ch, out_ch, 2, stride=2)
        self.csg = nn.ModuleList(GuidedBlock(out_ch) for _ in range(BLOCKS_PER_SCALE))
        self.cig = nn.ModuleList(GuidedBlock(out_ch) for _ in range(BLOCKS_PER_SCALE))

    def forward(self, f_in, f_sc, beta, gamma, epsilon, eta):
        if f_in.shape != f_sc.shape:
            raise ShapeMismatch(f"{tuple(f_in.shape)} vs {tuple(f_sc.shape)}")
        x = self.up(f_in + f_sc)
        for blk in self.csg:
            x = blk(x, epsilon, eta)
        for blk in self.cig:
            x = blk(x, beta, gamma)
        return x


@dataclass
class GuidanceParams:
    beta: list
    gamma: list
    epsilon: list
    eta: list


class DAGN(nn.Module):
    """Restoration network; `ci_encoder`/`cs_encoder` are frozen feature extractors."""

    def __init__(self, config: DAGNConfig = DAGNConfig(), ci_encoder: ResNetEncoder | None = None,
                 cs_encoder: ResNetEncoder | None = None):
        super().__init__()
        self.config = config
        s = config.width_scale
        w = [scaled(c, s) for c in BASE_WIDTHS]
        embed = w[-1]
        cif = feature_channels(s)
        needs_ci = config.use_cfm or config.ci_guidance
        needs_cs = config.cs_guidance
        self.ci_encoder = (ci_encoder or ResNetEncoder(s)) if needs_ci else None
        self.cs_encoder = (cs_encoder or ResNetEncoder(s)) if needs_cs else None
        for enc in (self.ci_encoder, self.cs_encoder):
            if enc is not None:
                enc.requires_grad_(False)
                enc.eval()

        self.base_encoder = BaseEncoder(s)
        self.cfm = CrossFeatureFusion(cif, w[-1]) if config.use_cfm else None
        self.ci_guider = Guider(cif, embed) if config.ci_guidance else None
        self.cs_guider = Guider(cif, embed) if config.cs_guidance else None
        self.body = nn.Sequential(*[ResBlock(w[-1]) for _ in range(BLOCKS_PER_SCALE)])
        self.dagbs = nn.ModuleList(DAGB(c) for c in reversed(w[1:]))
        self.tail = nn.Conv2d(w[0], 3, 3, padding=1)

        lengths = [embed // 2**i for i in (1, 2, 3)]
        decoder_widths = [d.out_channels for d in self.dagbs]
        if lengths != decoder_widths:
            raise ShapeMismatch(f"guidance lengths {lengths} do not match decoder widths {decoder_widths}")
        self.guidance_lengths = lengths

    def train(self, mode: bool = True):
        super().train(mode)
        # Frozen encoders keep their stage-one batch statistics.
        for enc in (self.ci_encoder, self.cs_encoder):
            if enc is not None:
                enc.eval()
        return self

    def trainable_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith(("ci_encoder.", "cs_encoder."))]

    def _constant(self, n, like, value):
        return torch.full((like.shape[0], n), value, dtype=like.dtype, device=like.device)

    def guidance(self, c, f_cif=None, f_csf=None) -> GuidanceParams:
        off_bias = 1.0 if self.config.disabled_mode == "literal" else 0.0
        if self.ci_guider is not None:
            beta, gamma = self.ci_guider(f_cif)
        else:
            beta = [self._constant(n, c, 0.0) for n in self.guidance_lengths]
            gamma = [self._constant(n, c, off_bias) for n in self.guidance_lengths]
        if self.cs_guider is not None:
            epsilon, eta = self.cs_guider(f_csf)
        else:
            epsilon = [self._constant(n, c, 0.0) for n in self.guidance_lengths]
            eta = [self._constant(n, c, off_bias) for n in self.guidance_lengths]
        return GuidanceParams(beta, gamma, epsilon, eta)

    def forward(self, c):
        squeeze = c.dim() == 3
        if squeeze:
            c = c.unsqueeze(0)
        h, w = c.shape[-2:]
        ph, pw = (-h) % PAD_MULTIPLE, (-w) % PAD_MULTIPLE
        x = F.pad(c, (0, pw, 0, ph), mode="reflect") if (ph or pw) else c

        f_cif = self.ci_encoder(x) if self.ci_encoder is not None else None
        f_csf = self.cs_encoder(x) if self.cs_encoder is not None else None
        g = self.guidance(x, f_cif, f_csf)

        pyr = self.base_encoder(x)
        f = pyr.bottleneck
        if self.cfm is not None:
            f = self.cfm(f_cif, f)
        f = self.body(f)
        for i, dagb in enumerate(self.dagbs):
            f = dagb(f, pyr.skips[-1 - i], g.beta[i], g.gamma[i], g.epsilon[i], g.eta[i])
        out = self.tail(f + pyr.skips[0])

        out = out[..., :h, :w]
        if not self.training:
            out = out.clamp(0.0, 1.0)
        return out.squeeze(0) if squeeze else out


def count_parameters(model: nn.Module, trainable_only=True) -> int:
    params = model.trainable_parameters() if trainable_only and hasattr(model, "trainable_parameters") else model.parameters()
    return sum(p.numel() for p in params)
