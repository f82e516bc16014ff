"""Run configuration: an INI file with a [common] section plus one section per command.

Example::

    [common]
    seed = 0
    width_scale = 1/8
    train_dir = data/train
    eval_dir = LIVE1          ; bare names are looked up under $DAGN_DATA_DIR

    [train-dagn]
    encoders = runs/enc/encoders.ckpt
    ite_2 = 5000
    batch_size = 16

Command-line flags override file values.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from fractions import Fraction
from pathlib import Path

from .data import list_images, resolve_dataset
from .errors import ValidationError
from .training import TrainConfig

COMMANDS = ("train-encoders", "train-dagn", "restore", "evaluate", "sweep-lambda", "ablate")
_TRAIN_FIELDS = {f.name: f for f in fields(TrainConfig)}
_TUPLE_FIELDS = {"qf_range", "encoder_lr_milestones"}


def _number(text: str):
    text = text.strip()
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    try:
        return float(Fraction(text))
    except (ValueError, ZeroDivisionError) as exc:
        raise ValidationError(f"not a number: {text!r}") from exc


def _numbers(text: str) -> list:
    return [_number(t) for t in str(text).replace(";", ",").split(",") if t.strip()]


def _train_value(name: str, raw):
    if name in _TUPLE_FIELDS:
        return tuple(_numbers(raw))
    ftype = str(_TRAIN_FIELDS[name].type)
    if ftype == "str":
        return str(raw).strip()
    val = _number(str(raw))
    if ftype == "int":
        if float(val) != int(val):
            raise ValidationError(f"{name} must be an integer, got {raw}")
        return int(val)
    return float(val)


@dataclass
class RunConfig:
    command: str
    train: TrainConfig
    train_dir: Path | None = None
    eval_dir: Path | None = None
    encoders: Path | None = None
    checkpoint: Path | None = None
    model: str = "identity"
    out_dir: Path = Path("runs")
    qf: list = field(default_factory=lambda: [10])
    grid: list = field(default_factory=lambda: [0.1, 1.0, 10.0])
    sweep_target: str = "ci"
    inputs: list = field(default_factory=list)

    def validate(self) -> "RunConfig":
        """Check every path and option the command will touch; raises ValidationError."""
        for q in self.qf:
            if not 1 <= int(q) <= 100:
                raise ValidationError(f"quality factor {q} outside [1, 100]")
        need_train = self.command in ("train-encoders", "train-dagn", "sweep-lambda", "ablate")
        need_eval = self.command in ("evaluate", "sweep-lambda", "ablate")
        if need_train:
            self.train_dir = _dataset(self.train_dir, "train_dir")
        if need_eval:
            self.eval_dir = _dataset(self.eval_dir, "eval_dir")
        if self.command == "train-dagn":
            if self.encoders is None or not Path(self.encoders).is_file():
                raise ValidationError(f"encoders checkpoint not found: {self.encoders}")
        if self.command == "restore":
            if self.checkpoint is None or not Path(self.checkpoint).is_file():
                raise ValidationError(f"checkpoint not found: {self.checkpoint}")
            if not self.inputs:
                raise ValidationError("no input images given")
            for p in self.inputs:
                if not Path(p).exists():
                    raise ValidationError(f"input not found: {p}")
        if self.command == "evaluate" and self.model != "identity" and not Path(self.model).is_file():
            raise ValidationError(f"model must be 'identity' or a checkpoint file, got {self.model}")
        if self.command == "sweep-lambda":
            if not self.grid:
                raise ValidationError("empty lambda grid")
            if any(v <= 0 for v in self.grid):
                raise ValidationError("lambda grid values must be positive")
            if self.sweep_target not in ("ci", "cs", "both"):
                raise ValidationError("sweep_target must be ci, cs or both")
        return self


def _dataset(value, name) -> Path:
    if value is None:
        raise ValidationError(f"{name} is required")
    path = resolve_dataset(value)
    try:
        list_images(path)
    except ValidationError as exc:
        raise ValidationError(f"{name}: {exc}") from exc
    return path


_RUN_KEYS = {"train_dir", "eval_dir", "encoders", "checkpoint", "model", "out_dir", "qf", "grid", "sweep_target"}


def load_run_config(command: str, config_file=None, overrides: dict | None = None) -> RunConfig:
    """Merge [common], [<command>] and CLI overrides (in that order) into a RunConfig."""
    if command not in COMMANDS:
        raise ValidationError(f"unknown command {command}")
    merged: dict = {}
    if config_file is not None:
        cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
        path = Path(config_file)
        if not path.is_file():
            raise ValidationError(f"config file not found: {path}")
        try:
            cp.read(path)
        except configparser.Error as exc:
            raise ValidationError(f"bad config file {path}: {exc}") from exc
        for section in ("common", command):
            if cp.has_section(section):
                merged.update(dict(cp.items(section)))
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})

    train_kwargs, run_kwargs = {}, {}
    for key, raw in merged.items():
        if key in _TRAIN_FIELDS:
            train_kwargs[key] = _train_value(key, raw)
        elif key in _RUN_KEYS:
            run_kwargs[key] = raw
        elif key == "inputs":
            run_kwargs["inputs"] = list(raw)
        else:
            raise ValidationError(f"unknown option {key!r} for {command}")
    for key in ("train_dir", "eval_dir", "encoders", "checkpoint", "out_dir"):
        if key in run_kwargs:
            run_kwargs[key] = Path(str(run_kwargs[key]).strip())
    if "qf" in run_kwargs:
        run_kwargs["qf"] = [int(q) for q in _numbers(_joined(run_kwargs["qf"]))]
    if "grid" in run_kwargs:
        run_kwargs["grid"] = [float(v) for v in _numbers(_joined(run_kwargs["grid"]))]
    if "model" in run_kwargs:
        run_kwargs["model"] = str(run_kwargs["model"]).strip()
    if "sweep_target" in run_kwargs:
        run_kwargs["sweep_target"] = str(run_kwargs["sweep_target"]).strip()
    try:
        train = TrainConfig.from_dict(train_kwargs)
    except TypeError as exc:
        raise ValidationError(str(exc)) from exc
    return RunConfig(command=command, train=train, **run_kwargs).validate()


def _joined(v):
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    return str(v)
