"""Synthetic segmentation volumes and the ``DFVOL001`` volume file format.

File layout (all little-endian)::

    8 bytes   magic b"DFVOL001"
    4 x u32   D, H, W, K
    D*H*W     float32 image values
    D*H*W     uint8 labels (each < K)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, ParameterError

MAGIC = b"DFVOL001"
_HEADER = struct.Struct("<4I")
KINDS = ("spheres", "boxes", "nested")
BACKGROUND_INTENSITY = 0.2


@dataclass
class VolumeSample:
    image: np.ndarray  # [1, D, H, W] float32 in [0, 1]
    labels: np.ndarray  # [D, H, W] uint8
    num_classes: int

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.labels.shape)

    def __eq__(self, other) -> bool:
        return (isinstance(other, VolumeSample) and self.num_classes == other.num_classes
                and self.image.dtype == other.image.dtype
                and self.image.tobytes() == other.image.tobytes()
                and self.labels.tobytes() == other.labels.tobytes()
                and self.image.shape == other.image.shape
                and self.labels.shape == other.labels.shape)


def class_intensity(c: int, num_classes: int) -> float:
    return BACKGROUND_INTENSITY + 0.6 * c / (num_classes - 1)


def _sphere_mask(coords, center, radius) -> np.ndarray:
    dist2 = sum((x - c) ** 2 for x, c in zip(coords, center))
    return dist2 <= radius * radius


def synth_dataset(seed: int, count: int, dims, kind: str = "spheres", num_classes: int = 2,
                  noise: float = 0.1) -> list[VolumeSample]:
    """Deterministic volumes holding 1-3 non-overlapping shapes of distinct foreground classes.

    The image is a class-dependent intensity plus Gaussian noise, clipped to
    [0, 1]; labels are the exact shape masks.
    """
    dims = tuple(int(v) for v in dims)
    if kind not in KINDS:
        raise ParameterError(f"unknown shape kind {kind!r}; expected one of {KINDS}")
    if num_classes < 2 or num_classes > 255:
        raise ParameterError(f"num_classes must lie in [2, 255], got {num_classes}")
    if kind == "nested" and num_classes < 3:
        raise ParameterError("nested shapes need at least two foreground classes")
    if min(dims) < 8:
        raise ParameterError(f"dims {dims} too small for the minimum shape radius (need >= 8)")
    if noise < 0:
        raise ParameterError("noise must be non-negative")
    rng = np.random.default_rng(seed)
    coords = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in dims), indexing="ij")
    samples = []
    for _ in range(count):
        labels = np.zeros(dims, dtype=np.uint8)
        fg = num_classes - 1
        wanted = int(rng.integers(1, min(3, fg if kind != "nested" else fg // 2) + 1))
        classes = rng.permutation(np.arange(1, num_classes))
        placed: list[tuple[np.ndarray, np.ndarray]] = []  # (lo, hi) bounding boxes
        for n in range(wanted):
            for _attempt in range(50):
                lo, hi, masks = _draw_shape(rng, kind, dims, coords,
                                            classes[2 * n: 2 * n + 2] if kind == "nested"
                                            else classes[n: n + 1])
                if all(np.any(hi < plo) or np.any(phi < lo) for plo, phi in placed):
                    break
            else:
                continue
            placed.append((lo, hi))
            for mask, c in masks:
                labels[mask] = c
        intens = np.array([class_intensity(c, num_classes) for c in range(num_classes)])
        image = intens[labels] + noise * rng.standard_normal(dims)
        image = np.clip(image, 0.0, 1.0).astype(np.float32)[None]
        samples.append(VolumeSample(image, labels, num_classes))
    return samples


def _draw_shape(rng, kind, dims, coords, classes):
    smallest = min(dims)
    if kind == "boxes":
        half = np.array([rng.uniform(0.15, 0.3) * n for n in dims])
        center = np.array([rng.uniform(h, n - 1 - h) for h, n in zip(half, dims)])
        lo, hi = center - half, center + half
        mask = np.ones(dims, dtype=bool)
        for x, a, b in zip(coords, lo, hi):
            mask &= (x >= a) & (x <= b)
        return lo, hi, [(mask, int(classes[0]))]
    radius = rng.uniform(0.25, 0.4) * smallest
    center = np.array([rng.uniform(radius, n - 1 - radius) for n in dims])
    masks = [(_sphere_mask(coords, center, radius), int(classes[0]))]
    if kind == "nested":
        masks.append((_sphere_mask(coords, center, 0.5 * radius), int(classes[1])))
    return center - radius, center + radius, masks


# file format ------------------------------------------------------------------

def encode_volume(sample: VolumeSample) -> bytes:
    d, h, w = sample.dims
    if sample.image.shape != (1, d, h, w):
        raise ParameterError(f"image {sample.image.shape} does not match labels {sample.dims}")
    labels = np.asarray(sample.labels)
    if labels.size and int(labels.max()) >= sample.num_classes:
        raise ParameterError(f"label {int(labels.max())} >= K={sample.num_classes}")
    return (MAGIC + _HEADER.pack(d, h, w, sample.num_classes)
            + np.asarray(sample.image, dtype="<f4").tobytes()
            + labels.astype(np.uint8).tobytes())


def decode_volume(buf: bytes) -> VolumeSample:
    if len(buf) < len(MAGIC) or buf[:len(MAGIC)] != MAGIC:
        raise FormatError("bad magic, expected DFVOL001", 0)
    off = len(MAGIC)
    if len(buf) < off + _HEADER.size:
        raise FormatError("truncated header", len(buf))
    d, h, w, k = _HEADER.unpack_from(buf, off)
    off += _HEADER.size
    n = d * h * w
    if n == 0 or k == 0:
        raise FormatError(f"empty volume {d}x{h}x{w} with K={k}", len(MAGIC))
    need = off + 5 * n
    if len(buf) < need:
        raise FormatError(f"truncated data: {len(buf)} of {need} bytes present", len(buf))
    if len(buf) > need:
        raise FormatError(f"{len(buf) - need} trailing bytes", need)
    image = np.frombuffer(buf, dtype="<f4", count=n, offset=off).astype(np.float32)
    labels = np.frombuffer(buf, dtype=np.uint8, count=n, offset=off + 4 * n).copy()
    bad = np.flatnonzero(labels >= k)
    if bad.size:
        i = int(bad[0])
        raise FormatError(f"label {labels[i]} >= K={k} at voxel {i}", off + 4 * n + i)
    return VolumeSample(image.reshape(1, d, h, w), labels.reshape(d, h, w), k)


def write_volume(path: str | Path, sample: VolumeSample) -> None:
    Path(path).write_bytes(encode_volume(sample))


def read_volume(path: str | Path) -> VolumeSample:
    return decode_volume(Path(path).read_bytes())


def write_dataset(directory: str | Path, samples: list[VolumeSample]) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, s in enumerate(samples):
        p = directory / f"case_{i:04d}.dfvol"
        write_volume(p, s)
        paths.append(p)
    return paths


def read_dataset(directory: str | Path) -> list[VolumeSample]:
    paths = sorted(Path(directory).glob("*.dfvol"))
    if not paths:
        raise FormatError(f"no .dfvol files in {directory}")
    return [read_volume(p) for p in paths]
