import sys

import numpy as np
import pytest
import torch
from skimage import data as skdata

from dagn.data import save_image

NATURAL = ("astronaut", "chelsea", "coffee", "rocket", "immunohistochemistry", "retina", "camera", "brick", "grass", "gravel")


def natural_image(name: str) -> np.ndarray:
    arr = getattr(skdata, name)()
    if isinstance(arr, tuple):
        arr = arr[0]
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=-1)
    return (arr[..., :3].astype(np.float32) / 255.0).transpose(2, 0, 1).copy()


def tiles(img: np.ndarray, size: int, count: int, rng: np.random.Generator) -> list[np.ndarray]:
    _, h, w = img.shape
    out = []
    for _ in range(count):
        t = int(rng.integers(0, h - size + 1))
        l = int(rng.integers(0, w - size + 1))
        out.append(img[:, t:t + size, l:l + size].copy())
    return out


@pytest.fixture(scope="session")
def natural_images():
    return {n: natural_image(n) for n in NATURAL}


@pytest.fixture
def image_folder(tmp_path, natural_images):
    """Folder of 12 PNG tiles (128x128) cut from natural test images."""

    def make(count=12, size=128, sources=("astronaut", "chelsea", "coffee"), seed=0, name="imgs"):
        rng = np.random.default_rng(seed)
        d = tmp_path / name
        d.mkdir()
        for i in range(count):
            src = natural_images[sources[i % len(sources)]]
            save_image(tiles(src, size, 1, rng)[0], d / f"img_{i:03d}.png")
        return d

    return make


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
