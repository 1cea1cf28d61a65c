"""Pixel-space degradation operators and noisy measurement synthesis.

All operators act on flattened square images of side ``size`` (shape (d,) or
(B, d)) and return flattened measurements. ``lift`` maps a measurement back
onto the image grid so it can be encoded.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.fft import dctn, idctn

from . import tensor as T
from .tensor import Tensor

KINDS = ("blur", "sr2", "inpaint", "jpeg", "identity")

# IJG baseline luminance quantization table
_JPEG_LUMA = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)


class NonlinearOperatorError(ValueError):
    """Raised when a matrix form is requested for a nonlinear operator."""

    def __init__(self, kind: str):
        self.kind = kind
        super().__init__(f"{kind}: nonlinear operator has no matrix form (cannot compute A^T for nonlinear A)")


def jpeg_table(quality: int) -> np.ndarray:
    """IJG quality scaling of the luminance table."""
    if not 1 <= quality <= 100:
        raise ValueError(f"quality must be in [1, 100], got {quality}")
    s = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    return np.clip(np.floor((_JPEG_LUMA * s + 50.0) / 100.0), 1.0, 255.0)


def gaussian_kernel_1d(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    g = gaussian_kernel_1d(size, sigma)
    return np.outer(g, g)


@dataclass(frozen=True)
class DegradationOp:
    kind: str
    size: int = 16
    kernel_size: int = 7
    kernel_sigma: float = 1.0
    factor: int = 2
    box: int | None = None  # side of the centered inpainting box, default size // 2
    fill: float = 0.0
    quality: int = 10
    _cache: dict = field(default_factory=dict, compare=False, repr=False, hash=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown degradation {self.kind!r}; expected one of {KINDS}")
        if self.kind == "sr2" and self.size % self.factor:
            raise ValueError(f"size {self.size} not divisible by factor {self.factor}")
        if self.kind == "jpeg" and self.size % 8:
            raise ValueError(f"jpeg needs size divisible by 8, got {self.size}")

    @property
    def linear(self) -> bool:
        return self.kind != "jpeg"

    @property
    def d(self) -> int:
        return self.size * self.size

    @property
    def out_dim(self) -> int:
        if self.kind == "sr2":
            return (self.size // self.factor) ** 2
        return self.d

    @property
    def box_side(self) -> int:
        return self.size // 2 if self.box is None else self.box

    @cached_property
    def mask(self) -> np.ndarray:
        """Flat 0/1 array, 1 where the pixel is observed (inpaint only)."""
        m = np.ones((self.size, self.size))
        b = self.box_side
        lo = (self.size - b) // 2
        m[lo : lo + b, lo : lo + b] = 0.0
        return m.reshape(-1)

    def _images(self, x) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2 and x.shape == (self.size, self.size):
            x = x.reshape(-1)
        single = x.ndim == 1
        xb = x.reshape(1, -1) if single else x
        if xb.shape[-1] != self.d:
            raise ValueError(f"{self.kind}: expected images with {self.d} pixels, got shape {x.shape}")
        return xb.reshape(-1, self.size, self.size), single

    def apply(self, x) -> np.ndarray:
        """Direct (non-matrix) implementation of the operator."""
        imgs, single = self._images(x)
        n = self.size
        if self.kind == "identity":
            out = imgs
        elif self.kind == "blur":
            # the normalized 2-D Gaussian is separable: filter rows, then columns
            p = self.kernel_size // 2
            g = gaussian_kernel_1d(self.kernel_size, self.kernel_sigma)
            padded = np.pad(imgs, ((0, 0), (p, p), (p, p)), mode="reflect")
            rows = np.lib.stride_tricks.sliding_window_view(padded, self.kernel_size, axis=2) @ g
            out = np.lib.stride_tricks.sliding_window_view(rows, self.kernel_size, axis=1) @ g
        elif self.kind == "sr2":
            f = self.factor
            out = imgs.reshape(-1, n // f, f, n // f, f).mean(axis=(2, 4))
        elif self.kind == "inpaint":
            m = self.mask.reshape(n, n)
            out = imgs * m + self.fill * (1.0 - m)
        else:
            out = self._jpeg(imgs)
        flat = out.reshape(out.shape[0], -1)
        return flat[0] if single else flat

    def _jpeg(self, imgs: np.ndarray) -> np.ndarray:
        q = jpeg_table(self.quality)
        coeffs = self.block_dct(imgs)
        quant = np.rint(coeffs / q) * q
        return np.clip(self.block_idct(quant), -1.0, 1.0)

    def block_dct(self, imgs: np.ndarray) -> np.ndarray:
        """8x8 orthonormal DCT per block on the 0..255 level scale."""
        n = self.size
        blocks = (imgs * 127.5).reshape(-1, n // 8, 8, n // 8, 8).transpose(0, 1, 3, 2, 4)
        return dctn(blocks, axes=(-2, -1), norm="ortho")

    def block_idct(self, coeffs: np.ndarray) -> np.ndarray:
        n = self.size
        blocks = idctn(coeffs, axes=(-2, -1), norm="ortho")
        return blocks.transpose(0, 1, 3, 2, 4).reshape(-1, n, n) / 127.5

    def as_matrix(self) -> np.ndarray:
        """Explicit (out_dim, d) matrix with ``apply(x) == M @ x``."""
        if not self.linear:
            raise NonlinearOperatorError(self.kind)
        if "matrix" not in self._cache:
            if self.kind == "inpaint" and self.fill != 0.0:
                raise ValueError("inpaint with nonzero fill is affine, not linear")
            m = self.apply(np.eye(self.d)).T
            m.flags.writeable = False
            self._cache["matrix"] = m
        return self._cache["matrix"]

    def lift(self, y) -> np.ndarray:
        """Place a measurement on the image grid (pixel replication for sr2)."""
        y = np.asarray(y, dtype=np.float64)
        if self.kind != "sr2":
            return y
        single = y.ndim == 1
        yb = y.reshape(1, -1) if single else y
        m = self.size // self.factor
        up = np.repeat(np.repeat(yb.reshape(-1, m, m), self.factor, axis=1), self.factor, axis=2)
        up = up.reshape(up.shape[0], -1)
        return up[0] if single else up

    def apply_tensor(self, x: Tensor) -> Tensor:
        """Tape-recorded application (node kind ``degrade``).

        Linear kinds back-propagate through the explicit matrix; jpeg uses a
        straight-through gradient (quantization treated as identity, pixel clip
        kept).
        """
        value = self.apply(x.data)
        if self.linear:
            mat = self.as_matrix()
            return T.custom_op("degrade", (x,), value, lambda g: (g @ mat,))
        imgs, single = self._images(x.data)
        q = jpeg_table(self.quality)
        raw = self.block_idct(np.rint(self.block_dct(imgs) / q) * q).reshape(imgs.shape[0], -1)
        inside = ((raw > -1.0) & (raw < 1.0)).astype(np.float64)
        inside = inside[0] if single else inside
        return T.custom_op("degrade", (x,), value, lambda g: (g * inside,))


def make_op(kind: str, size: int = 16, **params) -> DegradationOp:
    return DegradationOp(kind=kind, size=size, **params)


@dataclass(frozen=True)
class Measurement:
    y: np.ndarray
    sigma_y: float
    op_kind: str
    source_seed: int


def measure(op: DegradationOp, x, sigma_y: float = 0.02, rng: np.random.Generator | None = None, seed: int = 0) -> Measurement:
    """``y = A(x) + v`` with ``v ~ N(0, sigma_y^2 I)``; ``rng`` defaults to one seeded by ``seed``."""
    if sigma_y < 0:
        raise ValueError(f"sigma_y must be >= 0, got {sigma_y}")
    clean = op.apply(x)
    if rng is None:
        rng = np.random.default_rng(seed)
    y = clean + sigma_y * rng.standard_normal(clean.shape) if sigma_y > 0 else clean
    return Measurement(y, float(sigma_y), op.kind, seed)
