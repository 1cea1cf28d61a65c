"""Distortion metrics (PSNR, CPSNR) and a latent-feature Frechet distance proxy."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg

PSNR_CAP = 300.0
DATA_RANGE = 2.0


class AlignmentError(ValueError):
    """Reconstructions and references do not line up index for index."""


def psnr(x, x_hat) -> float:
    """PSNR in dB for images in [-1, 1] (data range 2); identical inputs give ``PSNR_CAP``."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ValueError(f"psnr: shape mismatch {x.shape} vs {x_hat.shape}")
    mse = float(np.mean((x - x_hat) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(DATA_RANGE**2 / mse))


def cpsnr(x, x_hat, op) -> float:
    """Consistency PSNR: ``psnr(A(x), A(x_hat))``."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ValueError(f"cpsnr: shape mismatch {x.shape} vs {x_hat.shape}")
    return psnr(op.apply(x), op.apply(x_hat))


def frechet_distance(feat_a, feat_b) -> tuple[float, bool]:
    """Squared Frechet distance between Gaussians fitted to two feature sets.

    Returns ``(distance, used_fallback)``; the fallback evaluates the trace
    term through the symmetric form ``sqrt(Sa^1/2 Sb Sa^1/2)`` when the direct
    matrix square root is not usable.
    """
    a = np.asarray(feat_a, dtype=np.float64)
    b = np.asarray(feat_b, dtype=np.float64)
    a = a.reshape(-1, 1) if a.ndim == 1 else a
    b = b.reshape(-1, 1) if b.ndim == 1 else b
    if len(a) == 0 or len(b) == 0:
        raise ValueError("frechet_distance needs non-empty sets")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False, bias=True))
    cov_b = np.atleast_2d(np.cov(b, rowvar=False, bias=True))
    fallback = False
    covmean = None
    try:
        covmean = linalg.sqrtm(cov_a @ cov_b)
        if np.iscomplexobj(covmean):
            if np.max(np.abs(covmean.imag)) > 1e-6 * max(1.0, np.max(np.abs(covmean.real))):
                covmean = None
            else:
                covmean = covmean.real
        if covmean is not None and not np.all(np.isfinite(covmean)):
            covmean = None
    except (linalg.LinAlgError, ValueError):
        covmean = None
    if covmean is None:
        fallback = True
        tr_covmean = _sym_sqrt_trace(cov_a, cov_b)
    else:
        tr_covmean = float(np.trace(covmean))
    diff = mu_a - mu_b
    d2 = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_covmean)
    return max(d2, 0.0), fallback


def _sym_sqrt_trace(cov_a: np.ndarray, cov_b: np.ndarray) -> float:
    cov_a = (cov_a + cov_a.T) / 2
    cov_b = (cov_b + cov_b.T) / 2
    w, v = np.linalg.eigh(cov_a)
    root_a = (v * np.sqrt(np.clip(w, 0, None))) @ v.T
    inner = root_a @ cov_b @ root_a
    ev = np.linalg.eigvalsh((inner + inner.T) / 2)
    return float(np.sum(np.sqrt(np.clip(ev, 0, None))))


def frechet_proxy(images_a, images_b, codec) -> tuple[float, bool]:
    """Frechet distance over codec latents (a desk-scale stand-in for FID)."""
    return frechet_distance(codec.encode(np.asarray(images_a)), codec.encode(np.asarray(images_b)))


@dataclass
class EvalReport:
    method: str
    degradation: str
    psnr: list[float]
    cpsnr: list[float]
    frechet_proxy: float
    frechet_fallback: bool
    times: list[float] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.psnr)

    def summary(self) -> dict:
        return {
            "method": self.method,
            "degradation": self.degradation,
            "n": self.n,
            "psnr_mean": float(np.mean(self.psnr)),
            "psnr_std": float(np.std(self.psnr)),
            "cpsnr_mean": float(np.mean(self.cpsnr)),
            "cpsnr_std": float(np.std(self.cpsnr)),
            "frechet_proxy": self.frechet_proxy,
            "frechet_fallback": self.frechet_fallback,
            "time_mean_s": float(np.mean(self.times)) if self.times else float("nan"),
        }

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for i, (p, c) in enumerate(zip(self.psnr, self.cpsnr)):
                rec = {"index": i, "psnr": p, "cpsnr": c}
                if self.times:
                    rec["time_s"] = self.times[i]
                fh.write(json.dumps(rec) + "\n")
            fh.write(json.dumps({"summary": self.summary()}) + "\n")


def evaluate_run(
    reconstructions,
    references,
    op,
    codec,
    method: str = "",
    times=None,
    recon_ids=None,
    ref_ids=None,
) -> EvalReport:
    """Aggregate PSNR, CPSNR and the Frechet proxy for one method/degradation."""
    rec = np.asarray(reconstructions, dtype=np.float64)
    ref = np.asarray(references, dtype=np.float64)
    if rec.shape != ref.shape:
        raise AlignmentError(f"shape mismatch {rec.shape} vs {ref.shape}")
    if recon_ids is not None or ref_ids is not None:
        if recon_ids is None or ref_ids is None or list(recon_ids) != list(ref_ids):
            raise AlignmentError("reconstruction and reference indices are not aligned")
    fd, fb = frechet_proxy(ref, rec, codec)
    return EvalReport(
        method=method,
        degradation=op.kind,
        psnr=[psnr(a, b) for a, b in zip(ref, rec)],
        cpsnr=[cpsnr(a, b, op) for a, b in zip(ref, rec)],
        frechet_proxy=fd,
        frechet_fallback=fb,
        times=list(times) if times is not None else [],
    )


def render_table(reports: list[EvalReport]) -> str:
    """Plain-text table: method, degradation, PSNR, CPSNR, Frechet proxy, time."""
    head = f"{'method':<10}{'degradation':<12}{'PSNR':>8}{'CPSNR':>8}{'FD-proxy':>10}{'time[s]':>10}"
    lines = [head, "-" * len(head)]
    for r in reports:
        s = r.summary()
        lines.append(
            f"{s['method']:<10}{s['degradation']:<12}{s['psnr_mean']:>8.2f}{s['cpsnr_mean']:>8.2f}"
            f"{s['frechet_proxy']:>10.4f}{s['time_mean_s']:>10.4f}"
        )
    lines.append("FD-proxy: Frechet distance over codec latents, not FID.")
    return "\n".join(lines)
