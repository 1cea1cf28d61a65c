"""Synthetic grayscale image distribution and PGM image I/O.

Images are soft Gaussian blobs over a linear gradient background, stored as
H x W float arrays in [-1, 1]. Each image is a pure function of its seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


class PGMError(ValueError):
    """Malformed or unsupported PGM file."""


@dataclass(frozen=True)
class DatasetSpec:
    image_size: int = 16
    train_count: int = 2000
    test_count: int = 100
    master_seed: int = 0

    def __post_init__(self):
        if self.image_size < 8:
            raise ValueError(f"image_size must be >= 8, got {self.image_size}")
        if self.train_count < 1 or self.test_count < 1:
            raise ValueError("train_count and test_count must be >= 1")

    @property
    def train_indices(self) -> range:
        return range(0, self.train_count)

    @property
    def test_indices(self) -> range:
        return range(self.train_count, self.train_count + self.test_count)


@dataclass(frozen=True)
class ImageSample:
    pixels: np.ndarray
    seed: int

    @property
    def size(self) -> int:
        return self.pixels.shape[0]

    def flat(self) -> np.ndarray:
        return self.pixels.reshape(-1)


@dataclass(frozen=True)
class Dataset:
    spec: DatasetSpec
    train: np.ndarray  # (n_train, d)
    test: np.ndarray  # (n_test, d)
    train_seeds: tuple[int, ...]
    test_seeds: tuple[int, ...]


# Generator constants, chosen so that principal-component coordinates of the
# centered images have roughly unit scale (keeps the latent clamp at +-4 inactive
# for in-distribution images).
_BG_OFFSET = 0.15
_BG_SLOPE = 0.12
_BLOB_AMP = (0.15, 0.45)
_BLOB_WIDTH = (0.12, 0.3)


def render_image(seed: int, image_size: int = 16) -> np.ndarray:
    rng = np.random.default_rng(seed)
    coords = np.linspace(-1.0, 1.0, image_size)
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    img = rng.uniform(-_BG_OFFSET, _BG_OFFSET) + _BG_SLOPE * (
        rng.uniform(-1, 1) * xx + rng.uniform(-1, 1) * yy
    )
    for _ in range(rng.integers(2, 5)):
        cy, cx = rng.uniform(-0.8, 0.8, size=2)
        width = rng.uniform(*_BLOB_WIDTH)
        amp = rng.uniform(*_BLOB_AMP) * rng.choice([-1.0, 1.0])
        img = img + amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2))
    return np.clip(img, -1.0, 1.0)


def generate_sample(spec: DatasetSpec, index: int) -> ImageSample:
    seed = spec.master_seed + index
    return ImageSample(render_image(seed, spec.image_size), seed)


def generate(spec: DatasetSpec) -> Dataset:
    """Deterministic dataset; image ``i`` uses seed ``master_seed + i``.

    Train images occupy indices ``[0, train_count)`` and test images the
    following ``test_count`` indices.
    """
    train_seeds = tuple(spec.master_seed + i for i in spec.train_indices)
    test_seeds = tuple(spec.master_seed + i for i in spec.test_indices)
    train = np.stack([render_image(s, spec.image_size).reshape(-1) for s in train_seeds])
    test = np.stack([render_image(s, spec.image_size).reshape(-1) for s in test_seeds])
    return Dataset(spec, train, test, train_seeds, test_seeds)


def to_bytes(pixels: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((np.asarray(pixels) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def from_bytes(raw: np.ndarray) -> np.ndarray:
    return raw.astype(np.float64) / 127.5 - 1.0


def write_image(sample: ImageSample | np.ndarray, path: str | Path) -> None:
    """Write an 8-bit binary PGM (P5, maxval 255)."""
    pixels = sample.pixels if isinstance(sample, ImageSample) else np.asarray(sample)
    if pixels.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {pixels.shape}")
    h, w = pixels.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + to_bytes(pixels).tobytes())


def _tokens(buf: bytes):
    """Yield (token, end_offset) for whitespace-separated header fields."""
    i, n = 0, len(buf)
    while True:
        while i < n and (buf[i : i + 1].isspace() or buf[i : i + 1] == b"#"):
            if buf[i : i + 1] == b"#":
                while i < n and buf[i : i + 1] not in (b"\n", b"\r"):
                    i += 1
            else:
                i += 1
        if i >= n:
            raise PGMError("truncated header")
        j = i
        while j < n and not buf[j : j + 1].isspace():
            j += 1
        yield buf[i:j], j
        i = j


def read_image(path: str | Path, seed: int = -1) -> ImageSample:
    buf = Path(path).read_bytes()
    toks = _tokens(buf)
    try:
        magic, _ = next(toks)
        if magic != b"P5":
            raise PGMError(f"unsupported magic {magic!r}, expected P5")
        w = int(next(toks)[0])
        h = int(next(toks)[0])
        maxval_tok, end = next(toks)
        maxval = int(maxval_tok)
    except ValueError as exc:
        if isinstance(exc, PGMError):
            raise
        raise PGMError(f"malformed header: {exc}") from None
    if maxval != 255:
        raise PGMError(f"unsupported maxval {maxval}, expected 255")
    if w <= 0 or h <= 0:
        raise PGMError(f"invalid size {w}x{h}")
    payload = buf[end + 1 :]
    if len(payload) != w * h:
        raise PGMError(f"size mismatch: header says {w * h} bytes, found {len(payload)}")
    raw = np.frombuffer(payload, dtype=np.uint8).reshape(h, w)
    return ImageSample(from_bytes(raw), seed)
