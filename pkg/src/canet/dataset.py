"""Synthetic labeled video clips whose classes differ only in motion.

Every clip shows two identical 3x3 Gaussian dots on a 32x32 torus, each
starting at an independent uniformly random position.  The five classes are
pure trajectory patterns:

    0  both dots drift left fast (3 px/frame)
    1  both dots drift left slowly (1 px/frame)
    2  both dots oscillate horizontally with period 4
    3  both dots drift left fast, then reverse at mid-clip
    4  the dots converge (one moves right, one left, 2 px/frame)

Positions wrap modulo the frame size, so the per-frame position distribution
is uniform for every class at every frame index: any single frame, or any
bag of shuffled frames, carries no class information.  Only the trajectory
across frames separates the classes, which is exactly the cue the temporal
attention modules claim to capture and a per-frame baseline cannot.

On-disk layout (little-endian): magic "CANV", version u32, clip count u64,
class count u32, T u32, H u32, W u32, element tag u8 (0 = float32), then
clips back to back as label u32 followed by T*H*W float32 pixels.
"""

import struct
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import FormatError

MAGIC = b"CANV"
VERSION = 1
ELEM_F32 = 0
NUM_CLASSES = 5
_HEADER = struct.Struct("<4sIQIIIIB")

FAST = 3
SLOW = 1
CONVERGE = 2
OSCILLATION = (0, 1, 2, 1)   # period-4 horizontal offsets

_SIGMA = 0.8
_BLOB = np.exp(-(np.arange(-1, 2)[:, None] ** 2 + np.arange(-1, 2)[None, :] ** 2)
               / (2.0 * _SIGMA ** 2))


@dataclass(frozen=True)
class DatasetHeader:
    clip_count: int
    classes: int
    frames: int
    height: int
    width: int
    elem_tag: int = ELEM_F32

    @property
    def clip_bytes(self) -> int:
        return 4 + 4 * self.frames * self.height * self.width


@dataclass
class ClipRecord:
    label: int
    frames: np.ndarray  # (T, H, W, 1) float32 in [0, 1]


def class_offsets(label: int, frames: int) -> tuple[np.ndarray, np.ndarray]:
    """Horizontal displacement of each dot per frame, before wrapping."""
    t = np.arange(frames)
    if label == 0:
        a = -FAST * t
    elif label == 1:
        a = -SLOW * t
    elif label == 2:
        a = np.array([OSCILLATION[i % 4] for i in range(frames)])
    elif label == 3:
        vel = np.where(np.arange(frames - 1) < frames // 2 - 1, -FAST, FAST)
        a = np.concatenate([[0], np.cumsum(vel)])
    elif label == 4:
        return CONVERGE * t, -CONVERGE * t
    else:
        raise ValueError(f"label must be 0..{NUM_CLASSES - 1}, got {label}")
    return a, a.copy()


def make_clip(rng: np.random.Generator, label: int, frames: int = 8,
              height: int = 32, width: int = 32, noise: float = 0.05):
    """Render one clip; returns (pixels (T, H, W, 1), dot columns (2, T))."""
    offsets = class_offsets(label, frames)
    rows = rng.integers(0, height, size=2)
    cols0 = rng.integers(0, width, size=2)
    clip = np.zeros((frames, height, width), dtype=np.float64)
    tracks = np.empty((2, frames), dtype=np.int64)
    for d in range(2):
        xs = (cols0[d] + offsets[d]) % width
        tracks[d] = xs
        for t in range(frames):
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    clip[t, (rows[d] + di) % height, (xs[t] + dj) % width] += \
                        _BLOB[di + 1, dj + 1]
    if noise:
        clip += rng.normal(0.0, noise, size=clip.shape)
    clip = np.clip(clip, 0.0, 1.0).astype(np.float32)
    return clip[..., None], tracks


def generate(path, seed: int, clips_per_class: int, frames: int = 8,
             height: int = 32, width: int = 32, noise: float = 0.05) -> DatasetHeader:
    """Write a balanced dataset; identical seeds give byte-identical files."""
    rng = np.random.default_rng(seed)
    count = clips_per_class * NUM_CLASSES
    header = DatasetHeader(count, NUM_CLASSES, frames, height, width)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, count, NUM_CLASSES,
                              frames, height, width, ELEM_F32))
        for i in range(count):
            label = i % NUM_CLASSES
            pixels, _ = make_clip(rng, label, frames, height, width, noise)
            fh.write(struct.pack("<I", label))
            fh.write(pixels.astype("<f4").tobytes())
    return header


def read_header(path) -> DatasetHeader:
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
    if len(raw) < _HEADER.size:
        raise FormatError(f"truncated header: {len(raw)} bytes, "
                          f"need {_HEADER.size} (offset {len(raw)})")
    magic, version, count, k, t, h, w, tag = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r} at offset 0")
    if version != VERSION:
        raise FormatError(f"unsupported version {version} at offset 4")
    if tag != ELEM_F32:
        raise FormatError(f"unknown element tag {tag} at offset {_HEADER.size - 1}")
    return DatasetHeader(count, k, t, h, w, tag)


def iter_clips(path) -> Iterator[ClipRecord]:
    """Stream ClipRecords, failing with the byte offset on truncation."""
    header = read_header(path)
    pixel_count = header.frames * header.height * header.width
    with open(path, "rb") as fh:
        fh.seek(_HEADER.size)
        offset = _HEADER.size
        for _ in range(header.clip_count):
            raw = fh.read(header.clip_bytes)
            if len(raw) < header.clip_bytes:
                raise FormatError(f"truncated clip at offset {offset}: "
                                  f"got {len(raw)} of {header.clip_bytes} bytes")
            (label,) = struct.unpack_from("<I", raw)
            if label >= header.classes:
                raise FormatError(f"label {label} out of range at offset {offset}")
            pixels = np.frombuffer(raw, dtype="<f4", count=pixel_count, offset=4)
            yield ClipRecord(label, pixels.reshape(
                header.frames, header.height, header.width, 1).copy())
            offset += header.clip_bytes


def load_all(path) -> tuple[DatasetHeader, np.ndarray, np.ndarray]:
    """Read the whole file into (header, labels (n,), clips (n, T, H, W, 1))."""
    header = read_header(path)
    labels = np.empty(header.clip_count, dtype=np.int64)
    clips = np.empty((header.clip_count, header.frames, header.height,
                      header.width, 1), dtype=np.float32)
    for i, rec in enumerate(iter_clips(path)):
        labels[i] = rec.label
        clips[i] = rec.frames
    return header, labels, clips


_M64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _M64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _M64
    return x ^ (x >> 31)


def train_val_split(count: int, val_fraction: float = 0.2):
    """Deterministic disjoint split ordered by a hash of the clip index."""
    order = sorted(range(count), key=lambda i: (_splitmix64(i), i))
    n_val = int(round(count * val_fraction))
    val = np.array(sorted(order[:n_val]), dtype=np.int64)
    train = np.array(sorted(order[n_val:]), dtype=np.int64)
    return train, val
