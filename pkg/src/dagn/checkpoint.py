"""Checkpoint container: a zip holding a key-value text manifest and float32 arrays.

Layout::

    manifest.txt            "key = value" lines, values are compact JSON
    arrays/<name>.npy       little-endian float32, one per tensor

Entries carry a fixed timestamp so that saving the same bundle twice produces
identical bytes.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import DecodeError, ManifestMismatch

FORMAT_VERSION = 1
MANIFEST = "manifest.txt"
ARRAY_DIR = "arrays/"
_ZIP_TIME = (1980, 1, 1, 0, 0, 0)
REQUIRED_KEYS = ("format_version", "kind", "width_scale", "arch_hash", "iteration", "content_hash")
MODEL_PREFIX = "model/"


def architecture_hash(state: dict) -> str:
    """Hash of parameter/buffer names and shapes (values excluded)."""
    lines = [f"{k}:{tuple(np.shape(v))}" for k, v in sorted(state.items())]
    return hashlib.sha256("\n".join(lines).encode()).hexdigest()[:16]


def _content_hash(arrays: dict) -> str:
    h = hashlib.sha256()
    for k in sorted(arrays):
        h.update(k.encode())
        h.update(np.asarray(arrays[k], dtype="<f4", order="C").tobytes())
    return h.hexdigest()[:16]


@dataclass
class CheckpointBundle:
    manifest: dict
    arrays: dict = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return self.manifest["kind"]

    @property
    def width_scale(self) -> float:
        return float(self.manifest["width_scale"])

    @property
    def iteration(self) -> int:
        return int(self.manifest["iteration"])

    def get(self, key, default=None):
        return self.manifest.get(key, default)

    def model_arrays(self, prefix: str = "") -> dict:
        full = MODEL_PREFIX + prefix
        return {k[len(full):]: v for k, v in self.arrays.items() if k.startswith(full)}

    def model_state(self, prefix: str = "") -> dict:
        """Torch state dict for the sub-module stored under `prefix`."""
        dtypes = self.manifest.get("int_arrays", {})
        out = {}
        for name, arr in self.model_arrays(prefix).items():
            t = torch.from_numpy(np.array(arr, dtype=np.float32))
            full = MODEL_PREFIX + prefix + name
            if full in dtypes:
                t = t.to(getattr(torch, dtypes[full]))
            out[name] = t
        return out


def _to_array(t) -> np.ndarray:
    if isinstance(t, torch.Tensor):
        t = t.detach().cpu()
        return t.to(torch.float32).numpy().astype("<f4", copy=True)
    return np.asarray(t, dtype="<f4")


def build_bundle(kind: str, width_scale: float, model: torch.nn.Module, *, iteration: int = 0,
                 optimizers: dict | None = None, extra: dict | None = None) -> CheckpointBundle:
    """Snapshot a model (and optionally its optimizers) into a bundle."""
    arrays, int_arrays = {}, {}
    state = model.state_dict()
    for k, v in state.items():
        name = MODEL_PREFIX + k
        arrays[name] = _to_array(v)
        if not v.is_floating_point():
            int_arrays[name] = str(v.dtype).replace("torch.", "")
    optim_meta = {}
    for oname, opt in (optimizers or {}).items():
        sd = opt.state_dict()
        optim_meta[oname] = {"param_groups": sd["param_groups"], "state_keys": {}}
        for idx, st in sd["state"].items():
            keys = []
            for sk, sv in st.items():
                if isinstance(sv, torch.Tensor):
                    arrays[f"optim/{oname}/{idx}/{sk}"] = _to_array(sv)
                    keys.append(sk)
            optim_meta[oname]["state_keys"][str(idx)] = keys
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "width_scale": float(width_scale),
        "arch_hash": architecture_hash(state),
        "iteration": int(iteration),
        "int_arrays": int_arrays,
        "optimizers": optim_meta,
    }
    manifest.update(extra or {})
    manifest["content_hash"] = _content_hash(arrays)
    return CheckpointBundle(manifest=manifest, arrays=arrays)


def restore_optimizer(bundle: CheckpointBundle, name: str, opt: torch.optim.Optimizer) -> None:
    meta = bundle.manifest["optimizers"][name]
    state = {}
    for idx, keys in meta["state_keys"].items():
        state[int(idx)] = {k: torch.from_numpy(np.array(bundle.arrays[f"optim/{name}/{idx}/{k}"], dtype=np.float32))
                           for k in keys}
    opt.load_state_dict({"state": state, "param_groups": meta["param_groups"]})


def save_checkpoint(bundle: CheckpointBundle, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = "".join(f"{k} = {json.dumps(bundle.manifest[k], sort_keys=True, separators=(',', ':'))}\n"
                   for k in sorted(bundle.manifest))
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(zipfile.ZipInfo(MANIFEST, _ZIP_TIME), text)
        for name in sorted(bundle.arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(bundle.arrays[name], dtype="<f4", order="C"),
                                      allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(ARRAY_DIR + name + ".npy", _ZIP_TIME), buf.getvalue())
    tmp.replace(path)
    return path


def _parse_manifest(text: str) -> dict:
    manifest = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, sep, value = line.partition(" = ")
        if not sep:
            raise ManifestMismatch(f"malformed manifest line: {line!r}")
        manifest[key] = json.loads(value)
    return manifest


def load_checkpoint(path, *, kind: str | None = None, width_scale: float | None = None) -> CheckpointBundle:
    """Read and fully validate a checkpoint; never returns a partially loaded bundle."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(str(path))
    try:
        with zipfile.ZipFile(path) as zf:
            names = zf.namelist()
            if MANIFEST not in names:
                raise ManifestMismatch(f"{path} has no manifest")
            manifest = _parse_manifest(zf.read(MANIFEST).decode("utf-8"))
            arrays = {}
            for n in names:
                if n.startswith(ARRAY_DIR) and n.endswith(".npy"):
                    arr = np.lib.format.read_array(io.BytesIO(zf.read(n)), allow_pickle=False)
                    if arr.dtype != np.dtype("<f4"):
                        raise ManifestMismatch(f"{n} has dtype {arr.dtype}, expected <f4")
                    arrays[n[len(ARRAY_DIR):-4]] = arr
    except ManifestMismatch:
        raise
    except (zipfile.BadZipFile, json.JSONDecodeError, UnicodeDecodeError, ValueError, EOFError, OSError) as exc:
        raise DecodeError(f"cannot read checkpoint {path}: {exc}") from exc

    missing = [k for k in REQUIRED_KEYS if k not in manifest]
    if missing:
        raise ManifestMismatch(f"manifest lacks {missing}")
    if manifest["format_version"] != FORMAT_VERSION:
        raise ManifestMismatch(f"format version {manifest['format_version']} != {FORMAT_VERSION}")
    if _content_hash(arrays) != manifest["content_hash"]:
        raise ManifestMismatch("array contents do not match the manifest checksum")
    bundle = CheckpointBundle(manifest=manifest, arrays=arrays)
    stored = {k: v for k, v in bundle.model_arrays().items()}
    if architecture_hash(stored) != manifest["arch_hash"]:
        raise ManifestMismatch("stored arrays do not match the manifest architecture hash")
    expected = _reference_arch_hash(manifest)
    if expected is not None and expected != manifest["arch_hash"]:
        raise ManifestMismatch(f"checkpoint architecture {manifest['arch_hash']} differs from this code ({expected})")
    if kind is not None and manifest["kind"] != kind:
        raise ManifestMismatch(f"expected a {kind} checkpoint, got {manifest['kind']}")
    if width_scale is not None and not np.isclose(float(manifest["width_scale"]), width_scale):
        raise ManifestMismatch(f"checkpoint width_scale {manifest['width_scale']} != requested {width_scale}")
    return bundle


def _reference_arch_hash(manifest: dict) -> str | None:
    # Imported lazily: the model modules depend on nothing here.
    from .encoders import DecoupleEncoders
    from .network import DAGN, DAGNConfig

    with torch.device("meta"):
        if manifest["kind"] == "stage1":
            model = DecoupleEncoders(float(manifest["width_scale"]))
        elif manifest["kind"] == "stage2":
            model = DAGN(DAGNConfig(**manifest["dagn_config"]))
        else:
            return None
    return architecture_hash({k: v for k, v in model.state_dict().items()})
