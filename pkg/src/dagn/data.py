"""Image IO, JPEG degradation, patch sampling and paired batch streaming.

Images travel through the package as float32 numpy arrays shaped [3, H, W]
with values in [0, 1].
"""

from __future__ import annotations

import io
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .errors import DecodeError, EmptyDataset, InvalidQualityFactor, PatchTooLarge, ShapeMismatch

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}
NUM_QF_CLASSES = 100
# Uncompressed originals are labelled with the quality-100 class.
ORIGINAL_QF = 100
QF_RANGE = (10, 95)
DATA_DIR_ENV = "DAGN_DATA_DIR"


@dataclass(frozen=True)
class QfLabel:
    qf: int

    def __post_init__(self):
        if not 1 <= self.qf <= NUM_QF_CLASSES:
            raise InvalidQualityFactor(f"quality factor {self.qf} outside [1, {NUM_QF_CLASSES}]")

    @classmethod
    def original(cls) -> "QfLabel":
        return cls(ORIGINAL_QF)

    @property
    def index(self) -> int:
        return self.qf - 1

    @property
    def one_hot(self) -> np.ndarray:
        v = np.zeros(NUM_QF_CLASSES, dtype=np.float32)
        v[self.index] = 1.0
        return v


@dataclass(frozen=True)
class ImagePair:
    compressed: np.ndarray
    original: np.ndarray
    qf: QfLabel

    def __post_init__(self):
        if self.compressed.shape != self.original.shape:
            raise ShapeMismatch(f"{self.compressed.shape} vs {self.original.shape}")


def to_uint8(img: np.ndarray) -> np.ndarray:
    """[3,H,W] float in [0,1] -> [H,W,3] uint8 with rounding."""
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    return np.round(arr * 255.0).astype(np.uint8).transpose(1, 2, 0)


def from_pil(im: Image.Image) -> np.ndarray:
    if im.mode in ("1", "L", "LA", "I", "I;16", "F"):
        im = im.convert("L").convert("RGB")
    elif im.mode != "RGB":
        im = im.convert("RGB")
    arr = np.asarray(im, dtype=np.uint8)
    return (arr.astype(np.float32) / 255.0).transpose(2, 0, 1).copy()


def load_image(path) -> np.ndarray:
    """Read a PNG/JPEG (or other PIL-readable) file as a [3,H,W] float array.

    Greyscale files are replicated to three channels.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(str(path))
    try:
        with Image.open(path) as im:
            im.load()
            return from_pil(im)
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise DecodeError(f"cannot decode {path}: {exc}") from exc


def save_image(img: np.ndarray, path) -> None:
    Image.fromarray(to_uint8(img), mode="RGB").save(path)


def jpeg_roundtrip(img: np.ndarray, qf: int) -> np.ndarray:
    """Encode with the IJG (libjpeg) quality scaling at `qf` and decode again."""
    if not 1 <= int(qf) <= 100:
        raise InvalidQualityFactor(f"quality factor {qf} outside [1, 100]")
    buf = io.BytesIO()
    # 4:2:0 chroma subsampling is the libjpeg default for colour images.
    Image.fromarray(to_uint8(img), mode="RGB").save(buf, format="JPEG", quality=int(qf), subsampling=2)
    buf.seek(0)
    with Image.open(buf) as im:
        return from_pil(im)


def resize_image(img: np.ndarray, size: int) -> np.ndarray:
    im = Image.fromarray(to_uint8(img), mode="RGB").resize((size, size), Image.BICUBIC)
    return from_pil(im)


def sample_patch(img: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    _, h, w = img.shape
    if size > h or size > w:
        raise PatchTooLarge(f"patch {size} does not fit image {h}x{w}")
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return img[:, top:top + size, left:left + size].copy()


def make_pair(original: np.ndarray, rng: np.random.Generator, qf_range=QF_RANGE) -> ImagePair:
    lo, hi = qf_range
    qf = int(rng.integers(lo, hi + 1))
    return ImagePair(jpeg_roundtrip(original, qf), original, QfLabel(qf))


def fixed_pair(original: np.ndarray, qf: int) -> ImagePair:
    return ImagePair(jpeg_roundtrip(original, qf), original, QfLabel(qf))


def list_images(dataset_dir) -> list[Path]:
    root = Path(dataset_dir)
    if not root.is_dir():
        raise EmptyDataset(f"{root} is not a directory")
    files = sorted(p for p in root.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS)
    if not files:
        raise EmptyDataset(f"no images found in {root}")
    return files


def resolve_dataset(name_or_path) -> Path:
    """Accept a directory path, or a bare dataset name looked up under $DAGN_DATA_DIR."""
    p = Path(name_or_path)
    if p.is_dir():
        return p
    cache = os.environ.get(DATA_DIR_ENV)
    if cache and (Path(cache) / str(name_or_path)).is_dir():
        return Path(cache) / str(name_or_path)
    return p


def batch_stream(
    dataset_dir,
    batch_size: int,
    patch_size: int | None,
    rng: np.random.Generator,
    *,
    resize: int | None = None,
    qf_range=QF_RANGE,
    epochs: int | None = None,
) -> Iterator[list[ImagePair]]:
    """Yield batches of freshly degraded pairs, reshuffling the folder every epoch.

    Each image contributes one sample per epoch: a random `patch_size` crop, or the
    whole image resized to `resize` x `resize` when `resize` is given. Incomplete
    trailing batches are dropped. `epochs=None` streams forever.
    """
    files = list_images(dataset_dir)
    if len(files) < batch_size:
        raise EmptyDataset(f"{len(files)} images cannot fill a batch of {batch_size}")
    cache: dict[Path, np.ndarray] = {}

    def get(p):
        if p not in cache:
            cache[p] = load_image(p)
        return cache[p]

    epoch = 0
    while epochs is None or epoch < epochs:
        order = rng.permutation(len(files))
        for start in range(0, len(files) - batch_size + 1, batch_size):
            batch = []
            for idx in order[start:start + batch_size]:
                img = get(files[idx])
                if resize is not None:
                    img = resize_image(img, resize)
                if patch_size is not None:
                    img = sample_patch(img, patch_size, rng)
                batch.append(make_pair(img, rng, qf_range))
            yield batch
        epoch += 1


def stack_pairs(pairs: Sequence[ImagePair], dtype=torch.float32):
    """Collate pairs into (compressed, original, qf class index) tensors."""
    c = torch.from_numpy(np.stack([p.compressed for p in pairs])).to(dtype)
    o = torch.from_numpy(np.stack([p.original for p in pairs])).to(dtype)
    qf = torch.tensor([p.qf.index for p in pairs], dtype=torch.long)
    return c, o, qf
