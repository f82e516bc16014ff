"""Two-stage training: decoupled feature encoders first, then the guided restoration network."""

from __future__ import annotations

import csv
import itertools
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import CheckpointBundle, build_bundle
from .data import QF_RANGE, ImagePair, batch_stream, stack_pairs
from .encoders import DecoupleEncoders, ResNetEncoder, StageOneOptimizers, stage1_step
from .errors import IncompatibleCheckpoint, NonFiniteLoss, ValidationError
from .network import DAGN, DAGNConfig, ablation_variant

log = logging.getLogger(__name__)

ENCODER_PREFIXES = ("ci_encoder.", "cs_encoder.")


@dataclass
class TrainConfig:
    # stage one (feature encoders)
    ite_1: int = 2000
    encoder_lr: float = 5e-4
    encoder_lr_milestones: tuple = (1 / 3, 2 / 3)
    encoder_lr_gamma: float = 0.1
    encoder_batch_size: int = 32
    encoder_image_size: int = 256
    lambda_ci: float = 1.0
    lambda_cs: float = 1.0
    clip_norm: float = 10.0
    # stage two (restoration network)
    ite_2: int = 5000
    dagn_lr: float = 1e-4
    dagn_lr_decay_at: float = 0.8
    dagn_lr_gamma: float = 0.5
    batch_size: int = 64
    patch_size: int = 96
    variant: str = "full"
    disabled_mode: str = "literal"
    # shared
    qf_range: tuple = QF_RANGE
    width_scale: float = 1 / 8
    seed: int = 0

    def __post_init__(self):
        self.qf_range = tuple(int(q) for q in self.qf_range)
        self.encoder_lr_milestones = tuple(float(m) for m in self.encoder_lr_milestones)
        if self.lambda_ci <= 0 or self.lambda_cs <= 0:
            raise ValidationError("lambda_ci and lambda_cs must be positive")
        if self.ite_1 < 0 or self.ite_2 < 0:
            raise ValidationError("iteration counts must be non-negative")
        if not 0 < self.width_scale <= 1:
            raise ValidationError(f"width_scale must lie in (0, 1], got {self.width_scale}")
        lo, hi = self.qf_range
        if not 1 <= lo <= hi <= 99:
            raise ValidationError(f"qf_range {self.qf_range} must lie within [1, 99]")
        if self.batch_size < 1 or self.encoder_batch_size < 1:
            raise ValidationError("batch sizes must be positive")
        if self.patch_size % 16 or self.encoder_image_size % 16:
            raise ValidationError("patch_size and encoder_image_size must be multiples of 16")
        ablation_variant(self.variant, self.width_scale, self.disabled_mode)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValidationError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)

    def as_dict(self):
        return asdict(self)

    def dagn_config(self) -> DAGNConfig:
        return ablation_variant(self.variant, self.width_scale, self.disabled_mode)


def encoder_lr_at(config: TrainConfig, it: int) -> float:
    drops = sum(it >= round(m * config.ite_1) for m in config.encoder_lr_milestones)
    return config.encoder_lr * config.encoder_lr_gamma**drops


def dagn_lr_at(config: TrainConfig, it: int) -> float:
    return config.dagn_lr * (config.dagn_lr_gamma if it >= round(config.dagn_lr_decay_at * config.ite_2) else 1.0)


def _set_lr(opt, lr):
    for g in opt.param_groups:
        g["lr"] = lr


def _seed_everything(seed: int):
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)
    return np.random.default_rng(seed)


def _fixed_batches(pairs: Sequence[ImagePair], batch_size: int) -> Iterator[list[ImagePair]]:
    pairs = list(pairs)
    if not pairs:
        raise ValidationError("no training pairs given")
    if batch_size >= len(pairs):
        return itertools.repeat(pairs)
    cyc = itertools.cycle(pairs)
    return iter(lambda: [next(cyc) for _ in range(batch_size)], None)


def _batches(dataset, batch_size, rng, *, patch_size=None, resize=None, qf_range=QF_RANGE):
    if isinstance(dataset, (str, Path)):
        return batch_stream(dataset, batch_size, patch_size, rng, resize=resize, qf_range=qf_range)
    return _fixed_batches(dataset, batch_size)


class LossLog:
    """Append-only CSV of (iteration, loss, value) rows."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.rows: list[tuple[int, str, float]] = []

    def add(self, it: int, values: dict):
        for k, v in values.items():
            self.rows.append((it, k, float(v)))

    def flush(self):
        if self.path is None:
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "loss", "value"])
            for it, k, v in self.rows:
                w.writerow([it, k, repr(v)])

    def series(self, name: str) -> np.ndarray:
        return np.array([v for _, k, v in self.rows if k == name])


def _stage1_bundle(model, opts, config, it, rng):
    return build_bundle(
        "stage1", config.width_scale, model, iteration=it,
        optimizers={"ci": opts.ci, "disc": opts.disc, "cs": opts.cs},
        extra={"config": config.as_dict(), "rng_state": rng.bit_generator.state},
    )


def train_stage1(config: TrainConfig, dataset, log_path=None, loss_log: LossLog | None = None) -> CheckpointBundle:
    """Train both auto-encoders (and their heads) for `ite_1` iterations.

    `dataset` is an image folder (whole images resized to `encoder_image_size`,
    degraded at a random QF each draw) or a fixed sequence of ImagePair.
    On a non-finite loss the raised NonFiniteLoss carries the last good bundle
    in its `checkpoint` attribute.
    """
    rng = _seed_everything(config.seed)
    model = DecoupleEncoders(config.width_scale).train()
    opts = StageOneOptimizers.adam(model, config.encoder_lr)
    loss_log = loss_log if loss_log is not None else LossLog(log_path)
    batches = _batches(dataset, config.encoder_batch_size, rng, resize=config.encoder_image_size,
                       qf_range=config.qf_range)
    try:
        for it in range(config.ite_1):
            lr = encoder_lr_at(config, it)
            for opt in opts.all():
                _set_lr(opt, lr)
            c, o, qf = stack_pairs(next(batches))
            try:
                losses = stage1_step(model, opts, c, o, qf, config.lambda_ci, config.lambda_cs, config.clip_norm)
            except NonFiniteLoss as exc:
                # stage1_step validates before updating, so the model is still the last good state
                exc.checkpoint = _stage1_bundle(model, opts, config, it, rng)
                raise
            loss_log.add(it, losses.as_dict())
            if it % 100 == 0:
                log.info("stage1 it=%d %s", it, losses.as_dict())
    finally:
        loss_log.flush()
    return _stage1_bundle(model, opts, config, config.ite_1, rng)


def build_dagn(dagn_config: DAGNConfig, encoders: CheckpointBundle | None = None) -> DAGN:
    """Construct a DAGN whose frozen encoders come from a stage-one bundle."""
    ci = cs = None
    if encoders is not None:
        if not np.isclose(encoders.width_scale, dagn_config.width_scale):
            raise IncompatibleCheckpoint(
                f"encoder checkpoint width_scale {encoders.width_scale} != {dagn_config.width_scale}")
        ci = ResNetEncoder(dagn_config.width_scale)
        ci.load_state_dict(encoders.model_state("ci_encoder."))
        cs = ResNetEncoder(dagn_config.width_scale)
        cs.load_state_dict(encoders.model_state("cs_encoder."))
    return DAGN(dagn_config, ci, cs)


def encoder_arrays(bundle: CheckpointBundle) -> dict:
    """The frozen-encoder arrays of a stage-one or stage-two bundle."""
    return {k: v for k, v in bundle.model_arrays().items() if k.startswith(ENCODER_PREFIXES)}


def train_stage2(config: TrainConfig, dataset, encoders: CheckpointBundle, log_path=None,
                 loss_log: LossLog | None = None) -> CheckpointBundle:
    """Train everything but the two feature encoders by Adam on the L1 pixel loss."""
    if encoders.kind != "stage1":
        raise IncompatibleCheckpoint(f"expected a stage1 bundle, got {encoders.kind}")
    rng = _seed_everything(config.seed)
    dagn_cfg = config.dagn_config()
    model = build_dagn(dagn_cfg, encoders).train()
    opt = torch.optim.Adam(model.trainable_parameters(), lr=config.dagn_lr, betas=(0.9, 0.999))
    loss_log = loss_log if loss_log is not None else LossLog(log_path)
    batches = _batches(dataset, config.batch_size, rng, patch_size=config.patch_size, qf_range=config.qf_range)

    def snapshot(it):
        return build_bundle(
            "stage2", config.width_scale, model, iteration=it, optimizers={"dagn": opt},
            extra={"config": config.as_dict(), "dagn_config": dagn_cfg.as_dict(),
                   "rng_state": rng.bit_generator.state},
        )

    try:
        for it in range(config.ite_2):
            _set_lr(opt, dagn_lr_at(config, it))
            c, o, _ = stack_pairs(next(batches))
            loss = F.l1_loss(model(c), o)
            if not torch.isfinite(loss):
                exc = NonFiniteLoss(f"l1 = {loss.item()} at iteration {it}")
                exc.checkpoint = snapshot(it)
                raise exc
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            loss_log.add(it, {"l1": loss.item()})
            if it % 100 == 0:
                log.info("stage2 it=%d l1=%.5f", it, loss.item())
    finally:
        loss_log.flush()

    bundle = snapshot(config.ite_2)
    before, after = encoder_arrays(encoders), encoder_arrays(bundle)
    for k, v in after.items():
        if not np.array_equal(before[k], v):
            raise RuntimeError(f"frozen encoder array {k} changed during stage two")
    return bundle


def load_dagn(bundle: CheckpointBundle) -> DAGN:
    if bundle.kind != "stage2":
        raise IncompatibleCheckpoint(f"expected a stage2 bundle, got {bundle.kind}")
    model = DAGN(DAGNConfig(**bundle.manifest["dagn_config"]))
    model.load_state_dict(bundle.model_state())
    return model.eval()


def restorer(model: DAGN):
    """Wrap a network as an ImageTensor -> ImageTensor function."""
    model.eval()

    def restore(img: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            out = model(torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32)))
        return out.numpy()

    return restore
