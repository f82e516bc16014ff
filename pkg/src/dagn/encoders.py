"""Compression-insensitive and compression-sensitive auto-encoders.

Both auto-encoders share one architecture: a ResNet-50 trunk running at output
stride 16 (no pooling head, last stage at stride 1) and a 15-layer fully
convolutional decoder that upsamples 16x. The insensitive branch is trained
against a feature discriminator, the sensitive branch against a 100-way
quality-factor predictor.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import NUM_QF_CLASSES, ORIGINAL_QF
from .errors import ChannelMismatch, EmptyBatch, NonFiniteLoss, ShapeMismatch, ShapeNotDivisible

OUTPUT_STRIDE = 16
RESNET50_LAYERS = (3, 4, 6, 3)
RESNET50_WIDTHS = (64, 128, 256, 512)
EXPANSION = 4
MIN_CHANNELS = 8  # stage-one width floor; 1-2 channel ReLU paths die in reduced nets


def scaled(channels: int, width_scale: float, floor: int = 1) -> int:
    return max(floor, int(round(channels * width_scale)))


def feature_channels(width_scale: float) -> int:
    """Channel count of the encoder output (2048 at full width)."""
    return EXPANSION * scaled(RESNET50_WIDTHS[-1], width_scale, MIN_CHANNELS)


def _kaiming_init(module: nn.Module, mode: str):
    # ReLU-gain init keeps activations from vanishing through the deep plain decoder.
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.kaiming_normal_(m.weight, mode=mode, nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def _batched(x: torch.Tensor):
    if x.dim() == 3:
        return x.unsqueeze(0), True
    return x, False


class Bottleneck(nn.Module):
    def __init__(self, in_ch, width, stride=1):
        super().__init__()
        out_ch = width * EXPANSION
        self.conv1 = nn.Conv2d(in_ch, width, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(width)
        self.conv2 = nn.Conv2d(width, width, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(width)
        self.conv3 = nn.Conv2d(width, out_ch, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(out_ch)
        self.downsample = None
        if stride != 1 or in_ch != out_ch:
            self.downsample = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = F.relu(self.bn1(self.conv1(x)))
        out = F.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return F.relu(out + identity)


class ResNetEncoder(nn.Module):
    """ResNet-50 without the pooling head; the last stage keeps stride 1."""

    def __init__(self, width_scale: float = 1.0):
        super().__init__()
        stem = scaled(64, width_scale, MIN_CHANNELS)
        self.stem = nn.Sequential(
            nn.Conv2d(3, stem, 7, stride=2, padding=3, bias=False),
            nn.BatchNorm2d(stem),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(3, stride=2, padding=1),
        )
        stages = []
        in_ch = stem
        for n_blocks, base, stride in zip(RESNET50_LAYERS, RESNET50_WIDTHS, (1, 2, 2, 1)):
            width = scaled(base, width_scale, MIN_CHANNELS)
            blocks = [Bottleneck(in_ch, width, stride)]
            in_ch = width * EXPANSION
            blocks += [Bottleneck(in_ch, width) for _ in range(n_blocks - 1)]
            stages.append(nn.Sequential(*blocks))
        self.stages = nn.Sequential(*stages)
        self.out_channels = in_ch

    def forward(self, x):
        x, squeeze = _batched(x)
        h, w = x.shape[-2:]
        if h % OUTPUT_STRIDE or w % OUTPUT_STRIDE:
            raise ShapeNotDivisible(f"encoder input {h}x{w} must be divisible by {OUTPUT_STRIDE}")
        f = self.stages(self.stem(x))
        return f.squeeze(0) if squeeze else f


class ConvDecoder(nn.Module):
    """15 conv layers: five 3x3 convs, then convs alternating with 2x transpose convs."""

    def __init__(self, width_scale: float = 1.0):
        super().__init__()
        s = width_scale
        self.in_channels = feature_channels(s)
        head = [self.in_channels] + [scaled(c, s, MIN_CHANNELS) for c in (512, 512, 256, 256, 128)]
        layers = []
        for a, b in zip(head[:-1], head[1:]):
            layers += [nn.Conv2d(a, b, 3, padding=1), nn.ReLU(inplace=True)]
        ch = head[-1]
        layers += [nn.Conv2d(ch, ch, 3, padding=1), nn.ReLU(inplace=True)]
        for c in (64, 32, 16, 8):
            nxt = scaled(c, s, MIN_CHANNELS)
            layers += [
                nn.ConvTranspose2d(ch, nxt, 2, stride=2), nn.ReLU(inplace=True),
                nn.Conv2d(nxt, nxt, 3, padding=1), nn.ReLU(inplace=True),
            ]
            ch = nxt
        layers += [nn.Conv2d(ch, 3, 3, padding=1), nn.Sigmoid()]
        self.body = nn.Sequential(*layers)
        _kaiming_init(self, "fan_in")

    def forward(self, f):
        f, squeeze = _batched(f)
        if f.shape[1] != self.in_channels:
            raise ShapeMismatch(f"decoder expects {self.in_channels} channels, got {f.shape[1]}")
        out = self.body(f)
        return out.squeeze(0) if squeeze else out


class PooledMLP(nn.Module):
    """Global average pool followed by a two-layer MLP (C -> C -> out)."""

    def __init__(self, in_channels: int, out_features: int):
        super().__init__()
        self.in_channels = in_channels
        self.fc1 = nn.Linear(in_channels, in_channels)
        self.fc2 = nn.Linear(in_channels, out_features)

    def forward(self, f):
        f, squeeze = _batched(f)
        if f.shape[1] != self.in_channels:
            raise ChannelMismatch(f"expected {self.in_channels} channels, got {f.shape[1]}")
        out = self.fc2(F.relu(self.fc1(f.mean(dim=(2, 3)))))
        return out.squeeze(0) if squeeze else out


@dataclass
class StageOneLosses:
    l_cc_ci: float
    l_cic: float
    l_cc_cs: float
    l_csc: float

    def as_dict(self):
        return {"l_cc_ci": self.l_cc_ci, "l_cic": self.l_cic, "l_cc_cs": self.l_cc_cs, "l_csc": self.l_csc}


class DecoupleEncoders(nn.Module):
    """Both stage-one auto-encoders together with their auxiliary heads."""

    GROUPS = ("ci_encoder", "ci_decoder", "discriminator", "cs_encoder", "cs_decoder", "qf_predictor")

    def __init__(self, width_scale: float = 1.0):
        super().__init__()
        self.width_scale = width_scale
        c = feature_channels(width_scale)
        self.ci_encoder = ResNetEncoder(width_scale)
        self.ci_decoder = ConvDecoder(width_scale)
        self.discriminator = PooledMLP(c, 1)
        self.cs_encoder = ResNetEncoder(width_scale)
        self.cs_decoder = ConvDecoder(width_scale)
        self.qf_predictor = PooledMLP(c, NUM_QF_CLASSES)

    # single-network views
    def ci_encode(self, img):
        return self.ci_encoder(img)

    def ci_decode(self, f):
        return self.ci_decoder(f)

    def cs_encode(self, img):
        return self.cs_encoder(img)

    def cs_decode(self, f):
        return self.cs_decoder(f)

    def discriminate(self, f):
        """Probability that features come from an uncompressed image."""
        return torch.sigmoid(self.discriminator(f)).squeeze(-1)

    def predict_qf(self, f):
        return torch.softmax(self.qf_predictor(f), dim=-1)

    # losses on a batch of (compressed, original) tensors
    def content_loss(self, c, o, which="ci"):
        _check_batch(c, o)
        enc, dec = (self.ci_encoder, self.ci_decoder) if which == "ci" else (self.cs_encoder, self.cs_decoder)
        rec = dec(enc(torch.cat([c, o])))
        return content_loss(rec[: len(c)], c, rec[len(c):], o)

    def insensitive_loss(self, c, o):
        _check_batch(c, o)
        logits = self.discriminator(self.ci_encoder(torch.cat([c, o]))).squeeze(-1)
        return insensitive_loss(logits[: len(c)], logits[len(c):])

    def sensitive_loss(self, c, o, qf_index):
        _check_batch(c, o)
        probs = torch.softmax(self.qf_predictor(self.cs_encoder(torch.cat([c, o]))), dim=-1)
        return sensitive_loss(probs[: len(c)], qf_index, probs[len(c):])

    def ci_parameters(self):
        return list(self.ci_encoder.parameters()) + list(self.ci_decoder.parameters())

    def cs_parameters(self):
        return (list(self.cs_encoder.parameters()) + list(self.cs_decoder.parameters())
                + list(self.qf_predictor.parameters()))


def _check_batch(c, o):
    if c.dim() != 4 or len(c) == 0:
        raise EmptyBatch("expected a non-empty [N,3,H,W] batch")
    if c.shape != o.shape:
        raise ShapeMismatch(f"{tuple(c.shape)} vs {tuple(o.shape)}")


def content_loss(rec_c, c, rec_o, o):
    """(1/2N) sum_i ( |D(E(c_i)) - c_i|_1 + |D(E(o_i)) - o_i|_1 ), |.|_1 = per-image mean."""
    if len(c) == 0:
        raise EmptyBatch("empty batch")
    return 0.5 * (F.l1_loss(rec_c, c) + F.l1_loss(rec_o, o))


def insensitive_loss(logit_c, logit_o):
    """(1/2N) sum_i ( -log J(E(c_i)) + log J(E(o_i)) ), from discriminator logits."""
    if len(logit_c) == 0:
        raise EmptyBatch("empty batch")
    return 0.5 * (-F.logsigmoid(logit_c) + F.logsigmoid(logit_o)).mean()


def sensitive_loss(prob_c, qf_index, prob_o):
    """(1/2N) sum_i ( |P(E(c_i)) - QF_c^i|_1 + |P(E(o_i)) - QF_o|_1 ) over 100 one-hot classes."""
    if len(prob_c) == 0:
        raise EmptyBatch("empty batch")
    target_c = F.one_hot(qf_index, NUM_QF_CLASSES).to(prob_c.dtype)
    target_o = torch.zeros_like(prob_o)
    target_o[:, ORIGINAL_QF - 1] = 1.0
    per_c = (prob_c - target_c).abs().sum(dim=1)
    per_o = (prob_o - target_o).abs().sum(dim=1)
    return 0.5 * (per_c + per_o).mean()


@dataclass
class StageOneOptimizers:
    ci: torch.optim.Optimizer
    disc: torch.optim.Optimizer
    cs: torch.optim.Optimizer

    @classmethod
    def adam(cls, model: DecoupleEncoders, lr: float, betas=(0.9, 0.999)):
        return cls(
            ci=torch.optim.Adam(model.ci_parameters(), lr=lr, betas=betas),
            disc=torch.optim.Adam(model.discriminator.parameters(), lr=lr, betas=betas),
            cs=torch.optim.Adam(model.cs_parameters(), lr=lr, betas=betas),
        )

    def all(self):
        return [self.ci, self.disc, self.cs]


def _finite(loss, name):
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"{name} = {loss.item()}")


def _apply(opt, params, loss, clip_norm):
    opt.zero_grad(set_to_none=True)
    loss.backward()
    if clip_norm:
        torch.nn.utils.clip_grad_norm_(params, clip_norm)
    opt.step()


def discriminator_step(model: DecoupleEncoders, opt, f_c, f_o, clip_norm=10.0):
    """One discriminator update descending -L_cic on detached features."""
    logits = model.discriminator(torch.cat([f_c, f_o]).detach()).squeeze(-1)
    n = len(f_c)
    loss = -insensitive_loss(logits[:n], logits[n:])
    _finite(loss, "-l_cic")
    _apply(opt, list(model.discriminator.parameters()), loss, clip_norm)
    return -loss.item()


def stage1_step(model: DecoupleEncoders, opts: StageOneOptimizers, c, o, qf_index,
                lambda_ci=1.0, lambda_cs=1.0, clip_norm=10.0) -> StageOneLosses:
    """One interleaved update: CI auto-encoder, discriminator, then CS auto-encoder + predictor.

    Returns the loss values measured before any of the three updates.
    """
    _check_batch(c, o)
    n = len(c)
    x = torch.cat([c, o])

    f = model.ci_encoder(x)
    rec = model.ci_decoder(f)
    l_cc_ci = content_loss(rec[:n], c, rec[n:], o)
    logits = model.discriminator(f).squeeze(-1)
    l_cic = insensitive_loss(logits[:n], logits[n:])
    total_ci = l_cc_ci + lambda_ci * l_cic
    _finite(total_ci, "ci objective")

    f_cs = model.cs_encoder(x)
    rec_cs = model.cs_decoder(f_cs)
    l_cc_cs = content_loss(rec_cs[:n], c, rec_cs[n:], o)
    probs = torch.softmax(model.qf_predictor(f_cs), dim=-1)
    l_csc = sensitive_loss(probs[:n], qf_index, probs[n:])
    total_cs = l_cc_cs + lambda_cs * l_csc
    _finite(total_cs, "cs objective")

    losses = StageOneLosses(l_cc_ci.item(), l_cic.item(), l_cc_cs.item(), l_csc.item())

    _apply(opts.ci, model.ci_parameters(), total_ci, clip_norm)
    discriminator_step(model, opts.disc, f[:n], f[n:], clip_norm)
    _apply(opts.cs, model.cs_parameters(), total_cs, clip_norm)
    return losses
