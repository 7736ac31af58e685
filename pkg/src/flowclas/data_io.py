"""Bit-exact tensor container, checkpoint archive, image/mask/manifest
handling, and the frozen seeded feature extractor.

Container layout (little-endian): magic "FTNS", version u16, rank u32,
dims u32 x rank, then float32 payload in row-major order. The checkpoint
archive is a named sequence of containers plus a JSON config blob, ending
with a CRC-32 of everything before it.
"""

from __future__ import annotations

import json
import math
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

__all__ = [
    "ContainerError",
    "CheckpointError",
    "ManifestError",
    "ManifestRecord",
    "ToyExtractor",
    "write_tensor",
    "read_tensor",
    "tensor_to_bytes",
    "tensor_from_bytes",
    "save_checkpoint",
    "load_checkpoint",
    "load_manifest",
    "write_manifest",
    "load_image",
    "save_image",
    "load_mask",
    "save_mask",
    "image_to_unit",
    "data_root",
    "DATA_DIR_ENV",
]

MAGIC = b"FTNS"
VERSION = 1
MAX_DIM = 2**31
DATA_DIR_ENV = "FLOWCLAS_DATA_DIR"


class ContainerError(ValueError):
    """Malformed tensor container; the message carries the byte offset."""


class CheckpointError(ValueError):
    """Malformed or corrupted checkpoint archive."""


class ManifestError(ValueError):
    """Malformed dataset manifest; the message carries the line number."""


# ---------------------------------------------------------------------------
# tensor container


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    # note: ascontiguousarray would promote rank-0 to rank-1
    arr = np.asarray(arr, dtype=np.float32, order="C")
    header = MAGIC + struct.pack("<HI", VERSION, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
    return header + dims + arr.tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one container starting at ``offset``; return (array, next offset)."""
    base = offset
    if len(buf) < base + 10:
        raise ContainerError(f"truncated header at byte {len(buf)} (need {base + 10})")
    if buf[base : base + 4] != MAGIC:
        raise ContainerError(f"bad magic at byte {base}")
    version, rank = struct.unpack_from("<HI", buf, base + 4)
    if version != VERSION:
        raise ContainerError(f"unsupported version {version} at byte {base + 4}")
    dims_off = base + 10
    if len(buf) < dims_off + 4 * rank:
        raise ContainerError(f"truncated dims at byte {len(buf)} (need {dims_off + 4 * rank})")
    dims = struct.unpack_from(f"<{rank}I", buf, dims_off) if rank else ()
    count = 1
    for d in dims:
        count *= d
        if count > MAX_DIM:
            raise ContainerError(f"dim overflow at byte {dims_off}: product of dims exceeds {MAX_DIM}")
    payload_off = dims_off + 4 * rank
    nbytes = count * 4
    if len(buf) < payload_off + nbytes:
        raise ContainerError(f"truncated payload at byte {len(buf)} (need {payload_off + nbytes})")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=payload_off).reshape(dims)
    return arr.copy(), payload_off + nbytes


def write_tensor(path, arr: np.ndarray) -> Path:
    path = Path(path)
    path.write_bytes(tensor_to_bytes(arr))
    return path


def read_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = tensor_from_bytes(buf)
    if end != len(buf):
        raise ContainerError(f"trailing garbage at byte {end}")
    return arr


# ---------------------------------------------------------------------------
# checkpoint archive


def save_checkpoint(path, entries: dict[str, np.ndarray], config: dict) -> Path:
    """Write named tensors plus a config blob, checksummed with CRC-32."""
    names = list(entries)
    if len(set(names)) != len(names):
        raise CheckpointError("duplicate entry names")
    out = bytearray()
    out += struct.pack("<I", len(names))
    for name in names:
        nb = name.encode("utf-8")
        out += struct.pack("<I", len(nb)) + nb
        out += tensor_to_bytes(entries[name])
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    out += struct.pack("<I", len(blob)) + blob
    out += struct.pack("<I", zlib.crc32(bytes(out)) & 0xFFFFFFFF)
    path = Path(path)
    path.write_bytes(bytes(out))
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    buf = Path(path).read_bytes()
    if len(buf) < 8:
        raise CheckpointError("archive too short")
    stored_crc = struct.unpack_from("<I", buf, len(buf) - 4)[0]
    if zlib.crc32(buf[:-4]) & 0xFFFFFFFF != stored_crc:
        raise CheckpointError("checksum mismatch: archive is corrupted")
    (count,) = struct.unpack_from("<I", buf, 0)
    offset = 4
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        if len(buf) < offset + 4:
            raise CheckpointError(f"truncated entry header at byte {offset}")
        (name_len,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        name = buf[offset : offset + name_len].decode("utf-8")
        offset += name_len
        if name in entries:
            raise CheckpointError(f"duplicate entry name {name!r}")
        arr, offset = tensor_from_bytes(buf, offset)
        entries[name] = arr
    (blob_len,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    config = json.loads(buf[offset : offset + blob_len].decode("utf-8"))
    offset += blob_len
    if offset != len(buf) - 4:
        raise CheckpointError(f"trailing garbage at byte {offset}")
    return entries, config


# ---------------------------------------------------------------------------
# toy feature extractor


class ToyExtractor:
    """Frozen seeded stand-in for a pre-trained encoder.

    Two stride-2 3x3 convolutions with relu, then a 1x1 projection to the
    requested channel count. Weights are drawn once from the seed and never
    change; extraction is pure numpy and records no gradients.
    """

    def __init__(self, seed: int = 0, channels: int = 16, hidden: tuple[int, int] = (8, 12)):
        rng = np.random.default_rng(np.random.SeedSequence([0x7E47, int(seed) & 0x7FFFFFFF]))
        h1, h2 = hidden
        self.seed = int(seed)
        self.channels = int(channels)
        self.w1 = rng.normal(0.0, math.sqrt(2.0 / (3 * 9)), (h1, 3, 3, 3)).astype(np.float32)
        self.b1 = rng.normal(0.0, 0.1, h1).astype(np.float32)
        self.w2 = rng.normal(0.0, math.sqrt(2.0 / (h1 * 9)), (h2, h1, 3, 3)).astype(np.float32)
        self.b2 = rng.normal(0.0, 0.1, h2).astype(np.float32)
        self.w3 = rng.normal(0.0, math.sqrt(1.0 / h2), (channels, h2)).astype(np.float32)
        self.b3 = rng.normal(0.0, 0.1, channels).astype(np.float32)

    @staticmethod
    def _conv3x3_s2(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
        c, h, wd = x.shape
        oh = -(-h // 2)
        ow = -(-wd // 2)
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1))).astype(np.float64)
        out = np.zeros((w.shape[0], oh, ow), dtype=np.float64)
        for di in range(3):
            for dj in range(3):
                sl = xp[:, di : di + 2 * oh - 1 : 2, dj : dj + 2 * ow - 1 : 2]
                out += np.einsum("oc,chw->ohw", w[:, :, di, dj].astype(np.float64), sl)
        return out + b.astype(np.float64)[:, None, None]

    def extract(self, image: np.ndarray) -> np.ndarray:
        """Map an (H,W,3) image in [0,1] to (C, ceil(H/4), ceil(W/4)) features."""
        img = np.asarray(image)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValueError(f"expected an (H,W,3) image, got shape {img.shape}")
        if img.dtype.kind not in "fd":
            raise ValueError(f"expected float pixels in [0,1], got dtype {img.dtype} (use image_to_unit)")
        x = img.astype(np.float64).transpose(2, 0, 1)
        h = np.maximum(self._conv3x3_s2(x, self.w1, self.b1), 0.0)
        h = np.maximum(self._conv3x3_s2(h, self.w2, self.b2), 0.0)
        feat = np.einsum("oc,chw->ohw", self.w3.astype(np.float64), h) + self.b3.astype(np.float64)[:, None, None]
        return feat.astype(np.float32)


# ---------------------------------------------------------------------------
# images and masks


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def save_image(path, arr: np.ndarray) -> Path:
    path = Path(path)
    Image.fromarray(np.asarray(arr, dtype=np.uint8), mode="RGB").save(path)
    return path


def load_mask(path) -> np.ndarray:
    """Read a 0/255 PNG mask as a {0,1} uint8 array."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.uint8)
    bad = ~np.isin(arr, (0, 255))
    if bad.any():
        raise ValueError(f"mask {path} has non-binary values (expected 0/255)")
    return (arr // 255).astype(np.uint8)


def save_mask(path, mask: np.ndarray) -> Path:
    m = np.asarray(mask)
    if not np.all(np.isin(np.unique(m), (0, 1))):
        raise ValueError("mask values must be 0/1")
    path = Path(path)
    Image.fromarray((m * 255).astype(np.uint8), mode="L").save(path)
    return path


def image_to_unit(arr: np.ndarray) -> np.ndarray:
    return np.asarray(arr, dtype=np.float32) / 255.0


# ---------------------------------------------------------------------------
# manifests


@dataclass
class ManifestRecord:
    image: Path
    mask: Path | None = None
    feature: Path | None = None
    id: str = ""
    extra: dict = field(default_factory=dict)


def data_root(manifest_path) -> Path:
    """Directory that relative manifest entries resolve against."""
    env = os.environ.get(DATA_DIR_ENV)
    if env:
        return Path(env)
    return Path(manifest_path).resolve().parent


def _resolve(root: Path, value: str) -> Path:
    p = Path(value)
    return p if p.is_absolute() else root / p


def load_manifest(path, require_mask: bool = False, check_files: bool = True) -> list[ManifestRecord]:
    """Parse a JSON-lines dataset manifest into validated records."""
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    root = data_root(path)
    records: list[ManifestRecord] = []
    missing: list[str] = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise ManifestError(f"{path}:{lineno}: malformed JSON ({e.msg})") from None
        if not isinstance(obj, dict) or "image" not in obj:
            raise ManifestError(f"{path}:{lineno}: record must be an object with an 'image' field")
        if require_mask and not obj.get("mask"):
            raise ManifestError(f"{path}:{lineno}: record missing 'mask' in a split that requires masks")
        rec = ManifestRecord(
            image=_resolve(root, obj["image"]),
            mask=_resolve(root, obj["mask"]) if obj.get("mask") else None,
            feature=_resolve(root, obj["feature"]) if obj.get("feature") else None,
            id=str(obj.get("id") or Path(obj["image"]).stem),
            extra={k: v for k, v in obj.items() if k not in ("image", "mask", "feature", "id")},
        )
        if check_files:
            for p in (rec.image, rec.mask, rec.feature):
                if p is not None and not Path(p).exists():
                    missing.append(f"{path}:{lineno}: missing file {p}")
        records.append(rec)
    if missing:
        raise ManifestError("; ".join(missing))
    return records


def write_manifest(path, rows: list[dict]) -> Path:
    path = Path(path)
    with open(path, "w") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    return path
