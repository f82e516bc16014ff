"""Acceptance criteria, one test per criterion.

Every test records a PASS/FAIL line (printed in the terminal summary by
conftest.py). Tolerances are fixed here and never adapted to results.

Criteria 1 needs the LIVE1 and BSD500 folders under $DAGN_DATA_DIR.
Criteria 6 and 7 are long CPU runs (marked slow).
"""

from __future__ import annotations

import csv
import functools
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import torch
import torch.nn.functional as F

sys.path.insert(0, str(Path(__file__).parent))

from conftest import natural_image, tiles  # noqa: E402
from test_encoders import natural_toy_batch  # noqa: E402
from test_gradients import REL_TOL, check_gradients  # noqa: E402

from dagn.cli import EXIT_OK, main  # noqa: E402
from dagn.data import fixed_pair, jpeg_roundtrip, resolve_dataset, save_image  # noqa: E402
from dagn.encoders import (  # noqa: E402
    DecoupleEncoders, StageOneOptimizers, content_loss, discriminator_step, feature_channels, insensitive_loss,
    sensitive_loss, stage1_step,
)
from dagn.metrics import psnr, psnr_b, ssim  # noqa: E402
from dagn.network import DAGN, BaseEncoder, CrossFeatureFusion, DAGNConfig, pyramid_pool  # noqa: E402
from dagn.training import (  # noqa: E402
    LossLog, TrainConfig, encoder_arrays, load_dagn, restorer, train_stage1, train_stage2,
)

RESULTS: dict[int, tuple[bool, str]] = {}

# Published JPEG rows: LIVE1 per QF (PSNR, SSIM, PSNR-B) and BSD500 QF 10.
LIVE1_JPEG = {10: (25.69, 0.743, 24.20), 20: (28.06, 0.826, 26.49), 30: (29.37, 0.861, 27.84),
              40: (30.28, 0.882, 28.84)}
BSD500_JPEG_QF10 = (25.92, 24.22)
TOL_PSNR, TOL_SSIM, TOL_PSNR_B = 0.15, 0.01, 0.3

TOY_INI = """
[common]
seed = 0
width_scale = 1/16
ite_1 = 2
ite_2 = 2
encoder_batch_size = 2
encoder_image_size = 32
batch_size = 2
patch_size = 32
train_dir = {train}
eval_dir = {eval}
"""


def verdict(n: int, ok: bool, detail: str):
    RESULTS[n] = (bool(ok), detail)
    print(f"ACCEPTANCE {n}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, detail


def criterion(n: int):
    """Record an unexpected exception as a FAIL line before re-raising it."""

    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except Exception as exc:
                if n not in RESULTS:
                    RESULTS[n] = (False, f"{type(exc).__name__}: {exc}")
                raise

        return run

    return wrap


def _toy_workspace(tmp_path, image_folder):
    train = image_folder(count=4, size=48, name="train")
    evald = image_folder(count=2, size=40, sources=("coffee",), seed=5, name="eval")
    cfg = tmp_path / "toy.ini"
    cfg.write_text(TOY_INI.format(train=train, eval=evald))
    return cfg


def _read_mean_row(path):
    rows = list(csv.reader(open(path)))
    assert rows[-1][0].startswith("mean(")
    return tuple(float(v) for v in rows[-1][1:])


@criterion(1)
def test_criterion_1_jpeg_baseline(tmp_path):
    live1, bsd = resolve_dataset("LIVE1"), resolve_dataset("BSD500")
    missing = [str(p) for p in (live1, bsd) if not p.is_dir()]
    if missing:
        verdict(1, False, f"dataset folders not available: {missing}; set $DAGN_DATA_DIR")
    lines, ok = [], True
    out = tmp_path / "eval"
    assert main(["evaluate", "--model", "identity", "--eval-dir", "LIVE1", "--qf", "10", "20", "30", "40",
                 "--out-dir", str(out)]) == EXIT_OK
    for q, (p_ref, s_ref, b_ref) in LIVE1_JPEG.items():
        p, s, b = _read_mean_row(out / f"metrics_LIVE1_qf{q}.csv")
        good = abs(p - p_ref) <= TOL_PSNR and abs(s - s_ref) <= TOL_SSIM and abs(b - b_ref) <= TOL_PSNR_B
        ok &= good
        lines.append(f"LIVE1 qf{q} {p:.2f}/{s:.3f}/{b:.2f} vs {p_ref}/{s_ref}/{b_ref}")
    assert main(["evaluate", "--model", "identity", "--eval-dir", "BSD500", "--qf", "10",
                 "--out-dir", str(out)]) == EXIT_OK
    p, _, b = _read_mean_row(out / "metrics_BSD500_qf10.csv")
    ok &= abs(p - BSD500_JPEG_QF10[0]) <= TOL_PSNR and abs(b - BSD500_JPEG_QF10[1]) <= TOL_PSNR_B
    lines.append(f"BSD500 qf10 {p:.2f}/{b:.2f} vs {BSD500_JPEG_QF10[0]}/{BSD500_JPEG_QF10[1]}")
    verdict(1, ok, "; ".join(lines))


@criterion(2)
def test_criterion_2_full_scale_numbers_are_reference_only(tmp_path, image_folder):
    cfg = _toy_workspace(tmp_path, image_folder)
    out = tmp_path / "ablate"
    assert main(["ablate", "--config", str(cfg), "--out-dir", str(out)]) == EXIT_OK
    rows = list(csv.DictReader(open(out / "ablation.csv")))
    refs = {r["variant"]: r for r in rows if r["kind"] == "reference"}
    measured = [r for r in rows if r["kind"] == "metrics"]
    ok = (refs["baseline"]["psnr"] == "27.46" and refs["full"]["psnr"] == "27.95"
          and all("reference only" in r["note"] for r in refs.values())
          and len(measured) == 5 and all(r["note"] == "" for r in measured))
    verdict(2, ok, "ablation.csv carries published LIVE1 qf10 numbers as reference-only rows, "
                   "separate from the toy-scale measured rows")


@criterion(3)
@pytest.mark.slow
def test_criterion_3_gradient_oracle():
    t0 = time.time()
    rng = np.random.default_rng(0)
    torch.manual_seed(0)

    def randomize(model):
        with torch.no_grad():
            for p in model.parameters():
                p.copy_(torch.from_numpy(rng.normal(0, 0.1, p.shape)))

    g = torch.Generator().manual_seed(0)
    o = torch.rand(2, 3, 16, 16, generator=g, dtype=torch.float64)
    c = (o + 0.1 * torch.randn(o.shape, generator=g, dtype=torch.float64)).clamp(0, 1)
    x, qf = torch.cat([c, o]), torch.tensor([9, 39])
    m = DecoupleEncoders(1 / 256).double().train()
    randomize(m)

    def ci_content():
        rec = m.ci_decoder(m.ci_encoder(x))
        return content_loss(rec[:2], c, rec[2:], o)

    def cic():
        logits = m.discriminator(m.ci_encoder(x)).squeeze(-1)
        return insensitive_loss(logits[:2], logits[2:])

    def cs_content():
        rec = m.cs_decoder(m.cs_encoder(x))
        return content_loss(rec[:2], c, rec[2:], o)

    def csc():
        probs = torch.softmax(m.qf_predictor(m.cs_encoder(x)), dim=-1)
        return sensitive_loss(probs[:2], qf, probs[2:])

    cases = [
        ("content/ci", ci_content, m.ci_parameters()),
        ("L_cic", cic, list(m.ci_encoder.parameters()) + list(m.discriminator.parameters())),
        ("content/cs", cs_content, list(m.cs_encoder.parameters()) + list(m.cs_decoder.parameters())),
        ("L_csc", csc, list(m.cs_encoder.parameters()) + list(m.qf_predictor.parameters())),
    ]

    net = DAGN(DAGNConfig(width_scale=1 / 64)).double().train()
    randomize(net)
    o2 = torch.rand(2, 3, 32, 32, generator=g, dtype=torch.float64)
    c2 = (o2 + 0.1 * torch.randn(o2.shape, generator=g, dtype=torch.float64)).clamp(0, 1)
    cases.append(("DAGN L1", lambda: F.l1_loss(net(c2), o2), net.trainable_parameters()))

    details, ok = [], True
    for name, fn, params in cases:
        worst, n, rejected = check_gradients(fn, params, rng)
        good = worst <= REL_TOL and n >= len(params) and rejected <= 0.05 * n
        ok &= good
        details.append(f"{name} worst {worst:.1e} over {n}")
    elapsed = time.time() - t0
    ok &= elapsed <= 300
    verdict(3, ok, f"{'; '.join(details)}; {elapsed:.0f}s")


@criterion(4)
def test_criterion_4_shapes():
    checks = []
    with torch.no_grad():
        enc = DecoupleEncoders(1.0).eval()
        for size in (96, 256):
            f = enc.ci_encode(torch.rand(3, size, size))
            g = enc.cs_encode(torch.rand(3, size, size))
            checks.append(tuple(f.shape) == tuple(g.shape) == (2048, size // 16, size // 16))
        pyr = BaseEncoder(1.0)(torch.rand(1, 3, 96, 96))
        checks.append([s.shape[1] for s in pyr.skips] == [64, 128, 256, 512])
        with torch.device("meta"):
            meta = DAGN(DAGNConfig(width_scale=1.0))
        checks.append(meta.guidance_lengths == [256, 128, 64])
        g_ci = meta.ci_guider(torch.zeros(1, 2048, 6, 6, device="meta"))
        checks.append([v.shape[-1] for v in g_ci[0] + g_ci[1]] == [256, 128, 64] * 2)
        checks.append(pyramid_pool(torch.rand(1, 4, 12, 12)).shape[-1] == 85)
        fused = CrossFeatureFusion(2048, 512)(torch.rand(1, 2048, 6, 6), torch.rand(1, 512, 12, 12))
        checks.append(tuple(fused.shape) == (1, 512, 12, 12))
        net = DAGN(DAGNConfig(width_scale=1.0)).eval()
        for h, w in ((96, 96), (128, 128), (256, 256), (96, 128), (100, 130)):
            checks.append(net(torch.rand(3, h, w)).shape == (3, h, w))
    verdict(4, all(checks), f"{sum(checks)}/{len(checks)} shape checks (full width)")


@criterion(5)
def test_criterion_5_freeze():
    rng = np.random.default_rng(0)
    pairs = [fixed_pair(rng.random((3, 32, 32), dtype=np.float32), q) for q in (10, 50)]
    cfg = dict(width_scale=1 / 16, encoder_batch_size=2, encoder_image_size=32, batch_size=2, patch_size=32,
               dagn_lr=1e-2)
    encoders = train_stage1(TrainConfig(ite_1=3, **cfg), pairs)
    reference = encoder_arrays(encoders)
    ok, n = True, 0
    for variant in ("full", "cigm", "csgm", "cfm"):
        net = train_stage2(TrainConfig(ite_2=5, variant=variant, **cfg), pairs, encoders)
        frozen = encoder_arrays(net)
        n += len(frozen)
        ok &= bool(frozen) and all(np.array_equal(reference[k], v) for k, v in frozen.items())
    verdict(5, ok, f"{n} encoder arrays bit-identical after stage two across 4 variants")


def _overfit_pairs():
    rng = np.random.default_rng(0)
    sources = [natural_image(n) for n in ("astronaut", "chelsea", "coffee")]
    pairs = []
    for k in range(8):
        img = sources[k % 3]
        pairs.append(fixed_pair(tiles(img, 96, 1, rng)[0], 10))
    return pairs


@criterion(6)
@pytest.mark.slow
def test_criterion_6_toy_overfit():
    t0 = time.time()
    pairs = _overfit_pairs()
    cfg = TrainConfig(width_scale=1 / 16, ite_1=50, encoder_lr=3e-4, encoder_batch_size=8, encoder_image_size=96,
                      ite_2=2000, dagn_lr=1e-3, batch_size=8, patch_size=96)
    encoders = train_stage1(cfg, pairs)
    log = LossLog()
    net = train_stage2(cfg, pairs, encoders, loss_log=log)
    final_l1 = float(log.series("l1")[-1])
    restore = restorer(load_dagn(net))
    before = np.mean([psnr(p.original, p.compressed) for p in pairs])
    after = np.mean([psnr(p.original, restore(p.compressed)) for p in pairs])
    elapsed = time.time() - t0
    ok = final_l1 <= 0.01 and after - before >= 3.0 and elapsed <= 15 * 60
    verdict(6, ok, f"training L1 {final_l1:.4f} (<= 0.01), PSNR {before:.2f} -> {after:.2f} dB "
                   f"(+{after - before:.2f}, need +3), {elapsed / 60:.1f} min (<= 15)")


TRAIN_SOURCES = ("astronaut", "coffee", "rocket", "immunohistochemistry", "camera", "brick", "grass")
HELDOUT_SOURCES = ("chelsea", "retina", "gravel")


@criterion(7)
@pytest.mark.slow
def test_criterion_7_toy_generalization(tmp_path):
    t0 = time.time()
    rng = np.random.default_rng(7)
    train_dir, eval_dir = tmp_path / "train", tmp_path / "heldout"
    train_dir.mkdir()
    eval_dir.mkdir()
    imgs = {n: natural_image(n) for n in TRAIN_SOURCES + HELDOUT_SOURCES}
    for i in range(50):
        src = imgs[TRAIN_SOURCES[i % len(TRAIN_SOURCES)]]
        save_image(tiles(src, 128, 1, rng)[0], train_dir / f"train_{i:02d}.png")
    for i in range(10):
        src = imgs[HELDOUT_SOURCES[i % len(HELDOUT_SOURCES)]]
        save_image(tiles(src, 128, 1, rng)[0], eval_dir / f"heldout_{i:02d}.png")

    cfg = TrainConfig(width_scale=1 / 8, ite_1=200, encoder_lr=3e-4, encoder_batch_size=8, encoder_image_size=64,
                      ite_2=5000, dagn_lr=5e-4, batch_size=8, patch_size=96)
    from dagn.metrics import evaluate_model, identity_model

    encoders = train_stage1(cfg, str(train_dir))
    net = train_stage2(cfg, str(train_dir), encoders)
    jpeg = evaluate_model(identity_model, eval_dir, 10).means[0]
    restored = evaluate_model(restorer(load_dagn(net)), eval_dir, 10).means[0]
    elapsed = time.time() - t0
    ok = restored - jpeg >= 0.2 and elapsed <= 2 * 3600
    verdict(7, ok, f"held-out qf10 PSNR {jpeg:.2f} -> {restored:.2f} dB (+{restored - jpeg:.2f}, need +0.2), "
                   f"{elapsed / 60:.0f} min (<= 120)")


@criterion(8)
def test_criterion_8_qf_predictor_toy():
    torch.manual_seed(0)
    c, o, qf = natural_toy_batch()
    m = DecoupleEncoders(1 / 16).train()
    opts = StageOneOptimizers.adam(m, 3e-4)
    valid = True
    for _ in range(250):
        stage1_step(m, opts, c, o, qf)
        with torch.no_grad():
            p = m.predict_qf(m.cs_encode(torch.cat([c, o])))
        valid &= bool(torch.all(p >= 0) and torch.allclose(p.sum(-1), torch.ones(8, dtype=p.dtype), atol=1e-5))
    m.eval()
    with torch.no_grad():
        pred = m.predict_qf(m.cs_encode(c)).argmax(-1)
        wild = m.predict_qf(torch.randn(16, feature_channels(1 / 16), 2, 2) * 100)
    valid &= bool(torch.all(wild >= 0) and torch.allclose(wild.sum(-1), torch.ones(16), atol=1e-5))
    acc = float((pred == qf).float().mean())
    verdict(8, acc == 1.0 and valid,
            f"train argmax accuracy {acc:.0%} on qf {{10,30,60,90}} (predicted {(pred + 1).tolist()}); "
            f"probability vectors valid: {valid}")


@criterion(9)
def test_criterion_9_metric_properties():
    rng = np.random.default_rng(9)
    src = [natural_image(n) for n in ("astronaut", "coffee", "camera")]
    violations = 0
    for i in range(100):
        ref = tiles(src[i % 3], 64, 1, rng)[0] if i % 2 else rng.random((3, 64, 64), dtype=np.float32)
        if i % 4 < 2:
            test = jpeg_roundtrip(ref, int(rng.integers(5, 96)))
        else:
            test = np.clip(ref + rng.normal(0, rng.uniform(0.001, 0.2), ref.shape), 0, 1)
        violations += psnr_b(ref, test) > psnr(ref, test)
    x = src[0][:, :64, :64]
    self_ssim = ssim(x, x)

    torch.manual_seed(0)
    m = DecoupleEncoders(1 / 16).train()
    c, o, _ = natural_toy_batch()
    with torch.no_grad():
        f = m.ci_encoder(torch.cat([c, o]))
    lcic = lambda: insensitive_loss(*m.discriminator(f).squeeze(-1).split(4)).item()
    before = lcic()
    discriminator_step(m, torch.optim.Adam(m.discriminator.parameters(), lr=1e-3), f[:4], f[4:])
    after = lcic()
    ok = violations == 0 and self_ssim == 1.0 and after > before
    verdict(9, ok, f"psnr_b > psnr in {violations}/100 pairs; ssim(x,x) = {self_ssim}; "
                   f"L_cic {before:.4f} -> {after:.4f} after one discriminator step")


@criterion(10)
def test_criterion_10_determinism(tmp_path, image_folder):
    cfg = _toy_workspace(tmp_path, image_folder)
    photo = tmp_path / "photo.jpg"
    save_image(jpeg_roundtrip(natural_image("chelsea")[:, :48, :64], 20), photo)

    def run_all(out):
        codes = [
            main(["train-encoders", "--config", str(cfg), "--out-dir", str(out)]),
            main(["train-dagn", "--config", str(cfg), "--out-dir", str(out), "--encoders", str(out / "encoders.ckpt")]),
            main(["restore", "--checkpoint", str(out / "dagn.ckpt"), str(photo), "--out-dir", str(out / "restored")]),
            main(["evaluate", "--config", str(cfg), "--model", str(out / "dagn.ckpt"), "--out-dir", str(out)]),
            main(["sweep-lambda", "--config", str(cfg), "--grid", "0.5", "2", "--out-dir", str(out / "sweep")]),
            main(["ablate", "--config", str(cfg), "--out-dir", str(out / "ablate")]),
        ]
        return codes, {p.relative_to(out): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()}

    codes_a, files_a = run_all(tmp_path / "a")
    codes_b, files_b = run_all(tmp_path / "b")
    same = files_a.keys() == files_b.keys() and all(files_a[k] == files_b[k] for k in files_a)
    expected = {"encoders.ckpt", "stage1_losses.csv", "dagn.ckpt", "stage2_losses.csv", "restored/photo.png",
                "metrics_eval_qf10.csv", "sweep/sweep.csv", "sweep/sweep.png", "ablate/ablation.csv"}
    ok = codes_a == codes_b == [EXIT_OK] * 6 and same and {str(k) for k in files_a} == expected
    verdict(10, ok, f"exit codes {codes_a}/{codes_b}; {len(files_a)} output files (checkpoints, CSVs, PNGs) "
                    f"byte-identical across two runs of all six commands: {same}")
