"""Linear (PCA) encoder/decoder standing in for a latent-diffusion autoencoder.

``encode(x) = basis.T @ (x - mean)`` and ``decode(z) = mean + basis @ z``.
With orthonormal basis columns the decoder is 1-Lipschitz and
``encode(decode(z)) == z``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .metrics import psnr
from .tensor import Tensor

LATENT_CLAMP = 4.0


class DegenerateCovarianceError(ValueError):
    def __init__(self, rank: int, k: int):
        self.rank = rank
        self.k = k
        super().__init__(f"training covariance has rank {rank}, fewer than the requested k={k}")


@dataclass
class CallCounter:
    encode: int = 0
    decode: int = 0

    def reset(self) -> None:
        self.encode = 0
        self.decode = 0


@dataclass
class LatentCodec:
    mean: np.ndarray  # (d,)
    basis: np.ndarray  # (d, k) decoder basis
    enc_basis: np.ndarray | None = None  # (d, k); defaults to ``basis``
    calls: CallCounter = field(default_factory=CallCounter, compare=False)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.basis = np.asarray(self.basis, dtype=np.float64)
        if self.enc_basis is None:
            self.enc_basis = self.basis
        if self.basis.shape != self.enc_basis.shape or self.basis.shape[0] != self.mean.shape[0]:
            raise ValueError("inconsistent codec dimensions")

    @property
    def d(self) -> int:
        return self.basis.shape[0]

    @property
    def k(self) -> int:
        return self.basis.shape[1]

    def _check(self, arr: np.ndarray, n: int, what: str) -> np.ndarray:
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim == 2 and arr.shape[-1] != n and arr.size == n:
            arr = arr.reshape(-1)
        if arr.shape[-1] != n:
            raise ValueError(f"{what}: expected trailing dimension {n}, got shape {arr.shape}")
        return arr

    def encode(self, x) -> np.ndarray:
        """Image(s) -> latent(s). Accepts (d,), (H, W) or (B, d)."""
        x = self._check(x, self.d, "encode")
        self.calls.encode += 1
        return (x - self.mean) @ self.enc_basis

    def decode(self, z) -> np.ndarray:
        """Latent(s) -> flat image(s); no range clamp."""
        z = self._check(z, self.k, "decode")
        self.calls.decode += 1
        return self.mean + z @ self.basis.T

    def encode_measure(self, y) -> np.ndarray:
        """Clamped encoding of a measurement lifted to the image grid."""
        return np.clip(self.encode(y), -LATENT_CLAMP, LATENT_CLAMP)

    def decode_image(self, z) -> np.ndarray:
        """Final emission: decode and clamp to the pixel range."""
        return np.clip(self.decode(z), -1.0, 1.0)

    def encode_tensor(self, x: Tensor) -> Tensor:
        """Tape-recorded encoder (node kind ``encode``)."""
        self._check(x.data, self.d, "encode")
        self.calls.encode += 1
        eb = self.enc_basis
        return T.custom_op("encode", (x,), (x.data - self.mean) @ eb, lambda g: (g @ eb.T,))

    def decode_tensor(self, z: Tensor) -> Tensor:
        """Tape-recorded decoder (node kind ``decode``)."""
        self._check(z.data, self.k, "decode")
        self.calls.decode += 1
        b = self.basis
        return T.custom_op("decode", (z,), self.mean + z.data @ b.T, lambda g: (g @ b,))

    def lipschitz(self, iters: int = 200, seed: int = 0) -> float:
        """Largest singular value of the decoder matrix by power iteration."""
        rng = np.random.default_rng(seed)
        v = rng.standard_normal(self.k)
        v /= np.linalg.norm(v)
        for _ in range(iters):
            w = self.basis.T @ (self.basis @ v)
            v = w / np.linalg.norm(w)
        return float(np.linalg.norm(self.basis @ v))

    def orthonormality_error(self) -> float:
        return float(np.max(np.abs(self.basis.T @ self.basis - np.eye(self.k))))


def fit(images: np.ndarray, k: int = 32, rank_tol: float = 1e-10) -> LatentCodec:
    """Principal-component codec with ``k`` orthonormal directions."""
    x = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
    if len(x) < k:
        raise ValueError(f"need at least k={k} images, got {len(x)}")
    mean = x.mean(axis=0)
    _, s, vt = np.linalg.svd(x - mean, full_matrices=False)
    rank = int(np.sum(s > rank_tol * max(s[0], 1e-300))) if s.size else 0
    if rank < k:
        raise DegenerateCovarianceError(rank, k)
    basis = vt[:k].T
    # sign convention: largest-magnitude entry of each column positive
    signs = np.sign(basis[np.argmax(np.abs(basis), axis=0), np.arange(k)])
    return LatentCodec(mean, basis * signs)


def fit_full(images: np.ndarray) -> LatentCodec:
    """Full-rank codec (k = d) built from the data mean and a complete basis."""
    x = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
    mean = x.mean(axis=0)
    cov = np.cov(x - mean, rowvar=False) if len(x) > 1 else np.zeros((x.shape[1],) * 2)
    _, vecs = np.linalg.eigh(cov)
    return LatentCodec(mean, vecs[:, ::-1].copy())


def encode_decode_report(codec: LatentCodec, images: np.ndarray, ops: dict, sigma_y: float, seed: int = 0) -> list[dict]:
    """PSNR between images and their encode-decode round trips.

    For each degradation returns mean PSNR(x, f(x)), PSNR(y_nl, f(y_nl)),
    PSNR(y, f(y)) and PSNR(y_nl, f(y)) with ``f = decode . encode`` applied to
    measurements lifted to the image grid.
    """
    rng = np.random.default_rng(seed)
    f = lambda v: codec.decode(codec.encode(v))
    x = np.asarray(images, dtype=np.float64)
    clean = float(np.mean([psnr(a, b) for a, b in zip(x, f(x))]))
    rows = []
    for name, op in ops.items():
        ax = op.apply(x)
        y_nl = op.lift(ax)
        y = op.lift(ax + sigma_y * rng.standard_normal(ax.shape))
        fy_nl, fy = f(y_nl), f(y)
        rows.append(
            {
                "degradation": name,
                "x_fx": clean,
                "ynl_fynl": float(np.mean([psnr(a, b) for a, b in zip(y_nl, fy_nl)])),
                "y_fy": float(np.mean([psnr(a, b) for a, b in zip(y, fy)])),
                "ynl_fy": float(np.mean([psnr(a, b) for a, b in zip(y_nl, fy)])),
            }
        )
    return rows
