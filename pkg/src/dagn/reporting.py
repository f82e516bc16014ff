"""Drivers behind the CLI commands: training runs, evaluation, lambda sweeps and ablations."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import replace
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import load_image, save_image
from .errors import DagnError, DecodeError
from .metrics import MetricsReport, evaluate_model, identity_model
from .network import VARIANTS, count_parameters
from .training import build_dagn, encoder_arrays, load_dagn, restorer, train_stage1, train_stage2

log = logging.getLogger(__name__)

# LIVE1, QF 10 (PSNR, SSIM, PSNR-B) from full-scale training; never reproduced here.
PUBLISHED_ABLATION = {
    "baseline": (27.46, 0.798, 27.11),
    "cigm": (27.82, 0.803, 27.57),
    "csgm": (27.74, 0.801, 27.50),
    "cfm": (27.72, 0.799, 27.47),
    "full": (27.95, 0.807, 27.70),
}


def run_train_encoders(rc: RunConfig):
    out = Path(rc.out_dir)
    bundle = train_stage1(rc.train, str(rc.train_dir), log_path=out / "stage1_losses.csv")
    path = save_checkpoint(bundle, out / "encoders.ckpt")
    log.info("wrote %s", path)
    return path


def run_train_dagn(rc: RunConfig):
    out = Path(rc.out_dir)
    encoders = load_checkpoint(rc.encoders, kind="stage1", width_scale=rc.train.width_scale)
    bundle = train_stage2(rc.train, str(rc.train_dir), encoders, log_path=out / "stage2_losses.csv")
    frozen = encoder_arrays(bundle)
    reference = encoder_arrays(encoders)
    if any(not np.array_equal(reference[k], v) for k, v in frozen.items()):
        raise DagnError("frozen encoders changed during training")
    path = save_checkpoint(bundle, out / "dagn.ckpt")
    log.info("wrote %s (%d frozen encoder arrays verified)", path, len(frozen))
    return path


def _expand_inputs(inputs):
    for p in map(Path, inputs):
        if p.is_dir():
            yield from sorted(q for q in p.iterdir() if q.is_file())
        else:
            yield p


def run_restore(rc: RunConfig):
    model = restorer(load_dagn(load_checkpoint(rc.checkpoint, kind="stage2")))
    out = Path(rc.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for path in _expand_inputs(rc.inputs):
        try:
            img = load_image(path)
        except DecodeError as exc:
            log.warning("skipping %s: %s", path, exc)
            continue
        restored = model(img)
        target = out / f"{path.stem}.png"
        save_image(restored, target)
        written.append(target)
    if not written:
        log.warning("no images restored")
    return written


def _model_for(spec: str):
    if spec == "identity":
        return identity_model
    return restorer(load_dagn(load_checkpoint(spec, kind="stage2")))


def run_evaluate(rc: RunConfig) -> list[MetricsReport]:
    model = _model_for(rc.model)
    name = Path(rc.eval_dir).name
    reports = []
    for q in rc.qf:
        rep = evaluate_model(model, rc.eval_dir, q, dataset=name)
        rep.to_csv(Path(rc.out_dir) / f"metrics_{name}_qf{q}.csv")
        mp, ms, mb = rep.means
        log.info("%s qf=%d psnr=%.3f ssim=%.4f psnr_b=%.3f", name, q, mp, ms, mb)
        reports.append(rep)
    return reports


def _write_rows(path: Path, header, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(x):
    return "nan" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.6f}"


def run_sweep_lambda(rc: RunConfig):
    """Train stage one and two per lambda value and score each run on eval_dir."""
    out = Path(rc.out_dir)
    qf = rc.qf[0]
    rows, results = [], []
    for lam in rc.grid:
        if rc.sweep_target == "ci":
            cfg = replace(rc.train, lambda_ci=lam)
        elif rc.sweep_target == "cs":
            cfg = replace(rc.train, lambda_cs=lam)
        else:
            cfg = replace(rc.train, lambda_ci=lam, lambda_cs=lam)
        try:
            enc = train_stage1(cfg, str(rc.train_dir))
            net = train_stage2(cfg, str(rc.train_dir), enc)
            rep = evaluate_model(restorer(load_dagn(net)), rc.eval_dir, qf)
            means, note = rep.means, ""
        except DagnError as exc:
            log.error("lambda=%g failed: %s", lam, exc)
            means, note = (float("nan"),) * 3, f"{type(exc).__name__}: {exc}"
        results.append((lam, *means))
        rows.append([f"{lam:g}", rc.sweep_target, qf, *map(_fmt, means), note])
    _write_rows(out / "sweep.csv", ["lambda", "target", "qf", "psnr", "ssim", "psnr_b", "error"], rows)
    plot_sweep(results, out / "sweep.png", rc.sweep_target)
    return out / "sweep.csv"


def plot_sweep(results, path: Path, target: str):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    lam = [r[0] for r in results]
    fig, axes = plt.subplots(1, 3, figsize=(10, 3))
    for ax, idx, label in zip(axes, (1, 2, 3), ("PSNR (dB)", "SSIM", "PSNR-B (dB)")):
        ax.plot(lam, [r[idx] for r in results], marker="o")
        ax.set_xscale("log")
        ax.set_xlabel(f"lambda_{target}")
        ax.set_ylabel(label)
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    # Fixed metadata keeps the PNG byte-stable across runs.
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)


def run_ablate(rc: RunConfig):
    """Shared stage one, then one stage-two run per variant; metrics, sizes and published references."""
    out = Path(rc.out_dir)
    qf = rc.qf[0]
    enc = train_stage1(rc.train, str(rc.train_dir))
    metric_rows, param_rows, ref_rows = [], [], []
    for name in VARIANTS:
        cfg = replace(rc.train, variant=name)
        params = count_parameters(build_dagn(cfg.dagn_config(), enc))
        try:
            net = train_stage2(cfg, str(rc.train_dir), enc)
            means = evaluate_model(restorer(load_dagn(net)), rc.eval_dir, qf).means
            note = ""
        except DagnError as exc:
            log.error("variant %s failed: %s", name, exc)
            means, note = (float("nan"),) * 3, f"{type(exc).__name__}: {exc}"
        metric_rows.append(["metrics", name, qf, *map(_fmt, means), "", note])
        param_rows.append(["params", name, "", "", "", "", params, "trainable parameters"])
        ref_rows.append(["reference", name, 10, *(f"{v:g}" for v in PUBLISHED_ABLATION[name]), "",
                         "published LIVE1 QF10 full-scale result; reference only"])
    _write_rows(out / "ablation.csv", ["kind", "variant", "qf", "psnr", "ssim", "psnr_b", "params", "note"],
                metric_rows + param_rows + ref_rows)
    return out / "ablation.csv"


RUNNERS = {
    "train-encoders": run_train_encoders,
    "train-dagn": run_train_dagn,
    "restore": run_restore,
    "evaluate": run_evaluate,
    "sweep-lambda": run_sweep_lambda,
    "ablate": run_ablate,
}
