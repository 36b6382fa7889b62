"""Dataset import, standardization, augmentation, stratified splits and packing.

Archive file layout (little-endian)::

    magic "LUSC" | version u32 | K u32 | N u32 | H u16 | W u16 | C u16 | reserved u16
    K x (u16 byte length, UTF-8 class name)
    3 x f32 channel mean | 3 x f32 channel std
    N x (label u16 | pad u16 | H*W*C f32 pixels, row-major)
    32-byte SHA-256 of every preceding byte

The trailing hash doubles as the archive fingerprint.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

MAGIC = b"LUSC"
VERSION = 1
_HEADER = struct.Struct("<4sIIIHHHH")
_RECORD = struct.Struct("<HH")
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp"}


class DatasetError(ValueError):
    pass


class ArchiveError(DatasetError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass
class DatasetArchive:
    images: np.ndarray  # N x H x W x 3, float32
    labels: np.ndarray  # N, int64
    class_names: list[str]
    mean: np.ndarray  # 3, float32
    std: np.ndarray  # 3, float32
    fingerprint: bytes = b""
    standardized: bool = False

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.mean = np.asarray(self.mean, dtype=np.float32)
        self.std = np.asarray(self.std, dtype=np.float32)
        if len(self.labels) != len(self.images):
            raise DatasetError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise DatasetError("label out of range for the class table")
        if not self.fingerprint:
            self.fingerprint = _body_digest(self)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def __len__(self) -> int:
        return len(self.labels)


def channel_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and (population) standard deviation over all pixels."""
    flat = images.reshape(-1, images.shape[-1]).astype(np.float64)
    return flat.mean(axis=0).astype(np.float32), flat.std(axis=0).astype(np.float32)


def resize_bilinear(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize with half-pixel centres; resizing to the same size is exact."""
    H, W = image.shape[:2]
    h, w = size
    if (h, w) == (H, W):
        return image.copy()

    def coords(n_out, n_in):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (src - lo).astype(np.float32)

    y0, y1, fy = coords(h, H)
    x0, x1, fx = coords(w, W)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = image[y0][:, x0] * (1 - fx) + image[y0][:, x1] * fx
    bot = image[y1][:, x0] * (1 - fx) + image[y1][:, x1] * fx
    return (top * (1 - fy) + bot * fy).astype(image.dtype)


def decode_image(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            rgb = np.asarray(im.convert("RGB"))
    except (UnidentifiedImageError, OSError) as exc:
        raise DatasetError(f"cannot decode image {path}: {exc}") from exc
    return rgb.astype(np.float32) / 255.0


def import_dataset(root, target_size: tuple[int, int], class_filter: Sequence[str] | None = None) -> DatasetArchive:
    """Read ``<root>/<class>/<image>`` into an archive resized to ``target_size``."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    available = sorted(p.name for p in root.iterdir() if p.is_dir())
    if class_filter:
        missing = sorted(set(class_filter) - set(available))
        if missing:
            raise DatasetError(f"classes not found under {root}: {', '.join(missing)}")
        names = sorted(set(class_filter))
    else:
        names = available
    if not names:
        raise DatasetError(f"no class directories under {root}")

    files: list[tuple[Path, int]] = []
    empty = []
    for label, name in enumerate(names):
        found = sorted(p for p in (root / name).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not found:
            empty.append(name)
        files += [(p, label) for p in found]
    if empty:
        raise DatasetError(f"empty class directories: {', '.join(empty)}")

    h, w = target_size
    images = np.empty((len(files), h, w, 3), dtype=np.float32)
    for i, (path, _) in enumerate(files):
        images[i] = resize_bilinear(decode_image(path), (h, w))
    labels = np.array([label for _, label in files], dtype=np.int64)
    mean, std = channel_stats(images)
    return DatasetArchive(images, labels, names, mean, std)


def standardize(archive: DatasetArchive) -> DatasetArchive:
    """Apply (x - mean) / std per channel using the archive's recorded stats."""
    if np.any(archive.std <= 0):
        raise DatasetError(f"channel std must be positive, got {archive.std.tolist()}")
    images = (archive.images - archive.mean) / archive.std
    return replace(archive, images=images.astype(np.float32), fingerprint=b"", standardized=True)


def with_recomputed_stats(archive: DatasetArchive) -> DatasetArchive:
    mean, std = channel_stats(archive.images)
    return replace(archive, mean=mean, std=std, fingerprint=b"")


def resize_archive(archive: DatasetArchive, size: tuple[int, int]) -> DatasetArchive:
    if archive.image_shape[:2] == tuple(size):
        return archive
    images = np.stack([resize_bilinear(im, size) for im in archive.images])
    return replace(archive, images=images, fingerprint=b"")


def subset(archive: DatasetArchive, class_names: Sequence[str]) -> DatasetArchive:
    """Keep only the named classes, relabelled in sorted-name order."""
    names = sorted(set(class_names))
    missing = sorted(set(names) - set(archive.class_names))
    if missing:
        raise DatasetError(f"classes not in archive: {', '.join(missing)}")
    old = [archive.class_names.index(n) for n in names]
    keep = np.isin(archive.labels, old)
    remap = np.full(archive.num_classes, -1)
    remap[old] = np.arange(len(old))
    images = archive.images[keep]
    mean, std = channel_stats(images)
    return DatasetArchive(images, remap[archive.labels[keep]], names, mean, std)


# -- augmentation -------------------------------------------------------------

@dataclass(frozen=True)
class AugmentationPolicy:
    horizontal_flip_prob: float = 0.5
    rotation_degrees_max: float = 15.0
    crop_scale_range: tuple[float, float] = (0.8, 1.0)
    color_jitter_strength: float = 0.1

    def __post_init__(self):
        lo, hi = self.crop_scale_range
        if not 0.0 <= self.horizontal_flip_prob <= 1.0:
            raise ValueError("horizontal_flip_prob must lie in [0, 1]")
        if not (0.0 < lo <= hi <= 1.0):
            raise ValueError(f"crop_scale_range must satisfy 0 < lo <= hi <= 1, got {self.crop_scale_range}")
        if self.rotation_degrees_max < 0 or self.color_jitter_strength < 0:
            raise ValueError("rotation and jitter magnitudes must be non-negative")

    @classmethod
    def identity(cls) -> "AugmentationPolicy":
        return cls(0.0, 0.0, (1.0, 1.0), 0.0)


def augment(image: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator) -> np.ndarray:
    """Flip, rotate, crop-and-resize, colour jitter; always in that order."""
    out = image
    H, W = image.shape[:2]
    if policy.horizontal_flip_prob > 0 and rng.random() < policy.horizontal_flip_prob:
        out = out[:, ::-1]
    if policy.rotation_degrees_max > 0:
        angle = rng.uniform(-policy.rotation_degrees_max, policy.rotation_degrees_max)
        out = ndimage.rotate(out, angle, axes=(1, 0), reshape=False, order=1, mode="nearest")
    lo, hi = policy.crop_scale_range
    if lo < 1.0:
        side = math.sqrt(rng.uniform(lo, hi))
        ch, cw = max(1, int(round(H * side))), max(1, int(round(W * side)))
        y = int(rng.integers(0, H - ch + 1))
        x = int(rng.integers(0, W - cw + 1))
        out = resize_bilinear(np.ascontiguousarray(out[y : y + ch, x : x + cw]), (H, W))
    if policy.color_jitter_strength > 0:
        s = policy.color_jitter_strength
        out = out + rng.uniform(-s, s, size=out.shape[-1]).astype(out.dtype)
    return np.ascontiguousarray(out, dtype=image.dtype)


# -- splits ---------------------------------------------------------------------

@dataclass
class SplitSpec:
    seed: int
    ratios: tuple[float, float, float]
    train: list[int] = field(default_factory=list)
    val: list[int] = field(default_factory=list)
    test: list[int] = field(default_factory=list)

    def subset(self, name: str) -> list[int]:
        if name not in ("train", "val", "test"):
            raise ValueError(f"unknown subset {name!r}")
        return getattr(self, name)

    def to_json(self) -> str:
        return json.dumps(
            {"seed": self.seed, "ratios": list(self.ratios), "train": self.train, "val": self.val, "test": self.test}
        )

    @classmethod
    def from_json(cls, text: str) -> "SplitSpec":
        d = json.loads(text)
        return cls(int(d["seed"]), tuple(d["ratios"]), d["train"], d["val"], d["test"])


def _class_counts(n: int, ratios: Sequence[float]) -> list[int]:
    counts = [int(math.floor(r * n + 1e-9)) for r in ratios]
    i = 0
    while sum(counts) < n:
        counts[i % 3] += 1
        i += 1
    for j in range(3):
        if counts[j] == 0:
            donor = int(np.argmax(counts))
            counts[donor] -= 1
            counts[j] += 1
    return counts


def split(labels, ratios: Sequence[float], seed: int) -> SplitSpec:
    """Stratified train/val/test partition.

    Each class is shuffled with one seeded generator (classes visited in
    label order) and cut into contiguous train/val/test runs.
    """
    if isinstance(labels, DatasetArchive):
        labels = labels.labels
    labels = np.asarray(labels)
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) <= 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three positive numbers summing to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    parts: list[list[int]] = [[], [], []]
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if len(idx) < 3:
            raise DatasetError(f"class {int(c)} has {len(idx)} samples; at least 3 are needed for train/val/test")
        idx = rng.permutation(idx)
        a, b, _ = _class_counts(len(idx), ratios)
        parts[0] += idx[:a].tolist()
        parts[1] += idx[a : a + b].tolist()
        parts[2] += idx[a + b :].tolist()
    return SplitSpec(int(seed), ratios, *(sorted(p) for p in parts))


# -- batching -------------------------------------------------------------------

def batches(
    archive: DatasetArchive,
    indices: Sequence[int],
    batch_size: int,
    shuffle_seed: int | None,
    policy: AugmentationPolicy | None = None,
    image_size: tuple[int, int] | None = None,
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield (images B x H x W x 3, labels B) batches; the last batch may be short.

    ``shuffle_seed=None`` keeps the given order (evaluation).  ``image_size``
    bilinearly resizes each image to a model's input grid before
    augmentation, so one archive can feed models with different inputs.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    indices = np.asarray(indices, dtype=np.int64)
    if len(indices) == 0:
        raise DatasetError("cannot batch an empty index list")
    if shuffle_seed is not None:
        indices = np.random.default_rng(shuffle_seed).permutation(indices)
    aug_rng = np.random.default_rng([int(shuffle_seed or 0), 0xA6])
    for start in range(0, len(indices), batch_size):
        sel = indices[start : start + batch_size]
        imgs = archive.images[sel]
        if image_size is not None and tuple(image_size) != imgs.shape[1:3]:
            imgs = np.stack([resize_bilinear(im, image_size) for im in imgs])
        if policy is not None:
            imgs = np.stack([augment(im, policy, aug_rng) for im in imgs])
        yield imgs, archive.labels[sel]


def epoch_order(indices: Sequence[int], shuffle_seed: int) -> np.ndarray:
    return np.random.default_rng(shuffle_seed).permutation(np.asarray(indices, dtype=np.int64))


# -- archive files ----------------------------------------------------------------

def _body_chunks(archive: DatasetArchive) -> Iterator[bytes]:
    N = len(archive.images)
    H, W, C = archive.images.shape[1:]
    yield _HEADER.pack(MAGIC, VERSION, archive.num_classes, N, H, W, C, 0)
    for name in archive.class_names:
        raw = name.encode("utf-8")
        yield struct.pack("<H", len(raw)) + raw
    yield archive.mean.astype("<f4").tobytes() + archive.std.astype("<f4").tobytes()
    for label, img in zip(archive.labels, archive.images):
        yield _RECORD.pack(int(label), 0) + np.ascontiguousarray(img, dtype="<f4").tobytes()


def _body_digest(archive: DatasetArchive) -> bytes:
    h = hashlib.sha256()
    for chunk in _body_chunks(archive):
        h.update(chunk)
    return h.digest()


def archive_size(num_classes_bytes: Sequence[int], n: int, h: int, w: int, c: int) -> int:
    """Exact file size for an archive with the given class-name byte lengths."""
    names = sum(2 + b for b in num_classes_bytes)
    return _HEADER.size + names + 24 + n * (_RECORD.size + h * w * c * 4) + 32


def pack_archive(archive: DatasetArchive, path) -> None:
    h = hashlib.sha256()
    with open(path, "wb") as f:
        for chunk in _body_chunks(archive):
            h.update(chunk)
            f.write(chunk)
        if h.digest() != archive.fingerprint:
            raise DatasetError("archive contents changed after its fingerprint was computed")
        f.write(h.digest())


def load_archive(path) -> DatasetArchive:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ArchiveError("file shorter than the archive header", len(data))
    magic, version, K, N, H, W, C, _ = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise ArchiveError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise ArchiveError(f"unsupported archive version {version}", 4)
    off = _HEADER.size
    names = []
    for _ in range(K):
        if off + 2 > len(data):
            raise ArchiveError("truncated class table", off)
        (n,) = struct.unpack_from("<H", data, off)
        if off + 2 + n > len(data):
            raise ArchiveError("truncated class name", off)
        names.append(data[off + 2 : off + 2 + n].decode("utf-8"))
        off += 2 + n
    expected = off + 24 + N * (_RECORD.size + H * W * C * 4) + 32
    if len(data) < expected:
        raise ArchiveError(f"truncated archive: expected {expected} bytes, found {len(data)}", len(data))
    if len(data) > expected:
        raise ArchiveError(f"trailing bytes after archive end", expected)
    stats = np.frombuffer(data, dtype="<f4", count=6, offset=off).astype(np.float32)
    off += 24
    rec = np.dtype([("label", "<u2"), ("pad", "<u2"), ("px", "<f4", (H * W * C,))])
    records = np.frombuffer(data, dtype=rec, count=N, offset=off)
    off += N * rec.itemsize
    body, digest = data[:off], data[off:]
    if hashlib.sha256(body).digest() != digest:
        raise ArchiveError("content hash mismatch", off)
    labels = records["label"].astype(np.int64)
    if N and labels.max() >= K:
        raise ArchiveError("label exceeds class count", _HEADER.size)
    images = records["px"].astype(np.float32).reshape(N, H, W, C)
    return DatasetArchive(images, labels, names, stats[:3], stats[3:], fingerprint=digest)
