"""Learned latent degradation operator ``H_theta``.

Maps a denoised latent (plus timestep and measurement-noise features) to a
prediction of the encoded measurement. Training follows the operator loss:
images are encoded, noised to a random timestep, denoised, and the network is
regressed (L1) onto the encoding of a freshly noised measurement. Gradients
never pass through the codec or the denoiser.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .codec import LATENT_CLAMP, LatentCodec
from .degradations import DegradationOp
from .diffusion import DivergenceError, NoiseSchedule
from .tensor import Tensor

log = logging.getLogger(__name__)

VARIANTS = ("tcond", "tindep")


@dataclass
class LatentOperatorModel:
    net: nn.MLP
    k: int
    variant: str = "tcond"
    T: int = 200
    op_kind: str = ""

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown operator variant {self.variant!r}; expected one of {VARIANTS}")

    @property
    def cond_dim(self) -> int:
        return 3 if self.variant == "tcond" else 1

    def _cond_batch(self, t, sigma_y, schedule: NoiseSchedule, n: int) -> np.ndarray:
        if np.ndim(t) == 0 and np.ndim(sigma_y) == 0:
            if self.variant == "tindep":
                row = [float(sigma_y)]
            else:
                row = [t / self.T, math.sqrt(1.0 - schedule.abar(int(t))), float(sigma_y)]
            return np.array([row] * n)
        t = np.broadcast_to(np.asarray(t), (n,))
        s = np.broadcast_to(np.asarray(sigma_y, dtype=np.float64), (n,))
        if self.variant == "tindep":
            return s[:, None].copy()
        ab = np.where(t == 0, 1.0, schedule.alpha_bar[np.maximum(t, 1) - 1])
        return np.stack([t / self.T, np.sqrt(1.0 - ab), s], axis=1)

    def __call__(self, z0_hat, t, sigma_y, schedule: NoiseSchedule) -> np.ndarray:
        """Numpy forward pass; ``t`` and ``sigma_y`` may be scalars or per-row."""
        z = np.asarray(z0_hat, dtype=np.float64)
        if z.shape[-1] != self.k:
            raise ValueError(f"operator expects latents of dim {self.k}, got shape {z.shape}")
        zb = np.atleast_2d(z)
        out = self.net(np.concatenate([zb, self._cond_batch(t, sigma_y, schedule, len(zb))], axis=1))
        return out[0] if z.ndim == 1 else out

    def apply_tensor(self, z0_hat: Tensor, t: int, sigma_y: float, schedule: NoiseSchedule) -> Tensor:
        """Tape-recorded forward pass on a batch (B, k)."""
        if z0_hat.shape[-1] != self.k or len(z0_hat.shape) != 2:
            raise T.ShapeError("operator", z0_hat.shape, (None, self.k))
        # scalar t and sigma give one shared row, broadcast inside the first layer
        shared = np.isscalar(t) and np.isscalar(sigma_y)
        cond = self._cond_batch(t, sigma_y, schedule, 1 if shared else z0_hat.shape[0])
        return self.net.forward(z0_hat, tail=cond)


def apply_operator(model: LatentOperatorModel, z0_hat, t: int, sigma_y: float, schedule: NoiseSchedule) -> np.ndarray:
    return model(z0_hat, t, sigma_y, schedule)


@dataclass
class OperatorTrainConfig:
    variant: str = "tcond"
    steps: int = 3000
    batch_size: int = 256
    lr: float = 3e-3
    width_factor: int = 4
    sigma_choices: tuple[float, ...] = (0.0, 0.02, 0.06)
    t_choices: tuple[int, ...] | None = None  # None: uniform over 0..T
    clamp_target: bool = False
    skip: bool = True
    seed: int = 0
    log_every: int = 500


@dataclass
class OperatorBatch:
    z0_hat: np.ndarray
    t: np.ndarray
    sigma: np.ndarray
    target: np.ndarray
    z0: np.ndarray = field(default=None)


def make_batch(
    images: np.ndarray,
    codec: LatentCodec,
    denoiser,
    op: DegradationOp,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    n: int,
    sigma_choices=(0.02,),
    t_choices=None,
    clamp_target: bool = False,
) -> OperatorBatch:
    """Draw (z0_hat, t, sigma_y, E(y)) training tuples."""
    idx = rng.integers(0, len(images), size=n)
    x = images[idx]
    sig = np.asarray(sigma_choices, dtype=np.float64)[rng.integers(0, len(sigma_choices), size=n)]
    ax = op.apply(x)
    y = ax + sig[:, None] * rng.standard_normal(ax.shape)
    target = codec.encode(op.lift(y))
    if clamp_target:
        target = np.clip(target, -LATENT_CLAMP, LATENT_CLAMP)
    z0 = codec.encode(x)
    if t_choices is None:
        t = rng.integers(0, schedule.T + 1, size=n)
    else:
        t = np.asarray(t_choices)[rng.integers(0, len(t_choices), size=n)]
    ab = np.where(t == 0, 1.0, schedule.alpha_bar[np.maximum(t, 1) - 1])[:, None]
    zt = np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * rng.standard_normal(z0.shape)
    z0_hat = denoiser.denoise(zt, t, schedule)
    return OperatorBatch(z0_hat, t, sig, target, z0)


def l1_per_coord(model: LatentOperatorModel, batch: OperatorBatch, schedule: NoiseSchedule, clamp: bool = False) -> float:
    """Mean absolute error per latent coordinate (optionally clamping both sides)."""
    pred = model(batch.z0_hat, batch.t, batch.sigma, schedule)
    tgt = batch.target
    if clamp:
        pred = np.clip(pred, -LATENT_CLAMP, LATENT_CLAMP)
        tgt = np.clip(tgt, -LATENT_CLAMP, LATENT_CLAMP)
    return float(np.mean(np.abs(pred - tgt)))


def init_operator(k: int, variant: str, schedule_T: int, rng: np.random.Generator, width_factor: int = 4, skip: bool = True, op_kind: str = "") -> LatentOperatorModel:
    cond = 3 if variant == "tcond" else 1
    width = width_factor * k
    net = nn.MLP.init([k + cond, width, width, k], rng, "tanh", skip_dim=k if skip else None)
    return LatentOperatorModel(net, k, variant, schedule_T, op_kind)


def train_operator(
    codec: LatentCodec,
    denoiser,
    op: DegradationOp,
    schedule: NoiseSchedule,
    images: np.ndarray,
    cfg: OperatorTrainConfig | None = None,
    history: list | None = None,
) -> LatentOperatorModel:
    """Fit ``H_theta`` by Adam on the L1 operator loss."""
    cfg = cfg or OperatorTrainConfig()
    rng = np.random.default_rng(cfg.seed)
    images = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
    model = init_operator(codec.k, cfg.variant, schedule.T, rng, cfg.width_factor, cfg.skip, op.kind)
    opt = nn.Adam(lr=cfg.lr)
    for step in range(cfg.steps):
        b = make_batch(images, codec, denoiser, op, schedule, rng, cfg.batch_size, cfg.sigma_choices, cfg.t_choices, cfg.clamp_target)
        inp = Tensor(np.concatenate([b.z0_hat, model._cond_batch(b.t, b.sigma, schedule, len(b.t))], axis=1))
        target = Tensor(b.target)
        n_el = b.target.size

        def loss_fn(fwd):
            return T.scale(T.l1(T.sub(fwd(inp), target)), 1.0 / n_el)

        value = nn.train_step(model.net, opt, loss_fn, nn.cosine_lr(cfg.lr, step, cfg.steps))
        if not np.isfinite(value):
            raise DivergenceError(step)
        if history is not None:
            history.append(value)
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("operator[%s] step %d loss %.5f", op.kind, step, value)
    return model
