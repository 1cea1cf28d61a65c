"""Latent DDPM machinery: schedule, forward noising, denoisers, ancestral step.

Two denoiser backends share one interface (``denoise`` on numpy arrays,
``denoise_tensor`` on the tape):

* :class:`GMMDenoiser` computes the exact posterior mean ``E[z0 | z_t]`` for a
  Gaussian-mixture prior, with its Jacobian supplied analytically.
* :class:`MLPDenoiser` predicts the added noise and converts it with
  ``z0_hat = (z_t - sqrt(1 - abar_t) * eps) / sqrt(abar_t)``.

Timesteps run ``1..T``; ``t = 0`` denotes clean data with ``abar_0 = 1``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import nn
from . import tensor as T
from .tensor import Tensor

log = logging.getLogger(__name__)


MAX_DEFAULT_BETA = 0.5


class DivergenceError(RuntimeError):
    def __init__(self, step: int, what: str = "loss"):
        self.step = step
        super().__init__(f"{what} became non-finite at step {step}")


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray  # beta[t-1] for t = 1..T

    def __post_init__(self):
        beta = np.array(self.beta, dtype=np.float64)
        beta.flags.writeable = False
        object.__setattr__(self, "beta", beta)
        abar = np.cumprod(1.0 - beta)
        abar.flags.writeable = False
        object.__setattr__(self, "_abar", abar)
        object.__setattr__(self, "_abar_list", [1.0, *abar.tolist()])

    @property
    def T(self) -> int:
        return len(self.beta)

    @property
    def alpha(self) -> np.ndarray:
        return 1.0 - self.beta

    @property
    def alpha_bar(self) -> np.ndarray:
        return self._abar

    def abar(self, t: int) -> float:
        """``abar_t`` with the ``abar_0 = 1`` convention."""
        self._check(t, allow_zero=True)
        return self._abar_list[t]

    def beta_at(self, t: int) -> float:
        self._check(t)
        return float(self.beta[t - 1])

    def _check(self, t: int, allow_zero: bool = False) -> None:
        lo = 0 if allow_zero else 1
        if not lo <= t <= self.T:
            raise ValueError(f"timestep {t} outside [{lo}, {self.T}]")


def make_schedule(T: int = 200, beta_start: float | None = None, beta_end: float | None = None) -> NoiseSchedule:
    """Linear beta schedule over ``t = 1..T``.

    Defaults rescale the classic 1000-step range (1e-4 .. 0.02) by ``1000 / T``
    so that the total noise injected is independent of ``T``. For very short
    schedules (T <= 20) the rescaled values are capped at ``MAX_DEFAULT_BETA``.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if beta_end is None:
        beta_end = min(0.02 * 1000.0 / T, MAX_DEFAULT_BETA)
    if beta_start is None:
        beta_start = min(1e-4 * 1000.0 / T, beta_end)
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return NoiseSchedule(np.linspace(beta_start, beta_end, T))


def forward_noise(z0, t: int, schedule: NoiseSchedule, rng: np.random.Generator) -> np.ndarray:
    """Sample ``z_t ~ N(sqrt(abar_t) z0, (1 - abar_t) I)``."""
    ab = schedule.abar(t)
    z0 = np.asarray(z0, dtype=np.float64)
    if t == 0:
        return z0.copy()
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * rng.standard_normal(z0.shape)


def step_coefficients(t: int, schedule: NoiseSchedule) -> tuple[float, float, float]:
    """(coef on z_t, coef on z0_hat, noise std) of the ancestral update."""
    ab_t = schedule.abar(t)
    ab_prev = schedule.abar(t - 1)
    beta = schedule.beta_at(t)
    alpha = 1.0 - beta
    c_z = np.sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab_t)
    c_x = np.sqrt(ab_prev) * beta / (1.0 - ab_t)
    std = np.sqrt((1.0 - ab_prev) / (1.0 - ab_t) * beta)
    return float(c_z), float(c_x), float(std)


def ancestral_step(z_t, z0_hat, t: int, schedule: NoiseSchedule, rng: np.random.Generator | None = None, noise=None) -> np.ndarray:
    """Draw ``z'_{t-1}`` from the Gaussian posterior given ``z_t`` and ``z0_hat``.

    At ``t = 1`` the noise coefficient is zero and no noise is drawn.
    """
    c_z, c_x, std = step_coefficients(t, schedule)
    out = c_z * np.asarray(z_t) + c_x * np.asarray(z0_hat)
    if std > 0.0:
        if noise is None:
            noise = rng.standard_normal(out.shape)
        out = out + std * noise
    return out


def _time_features(t: int, schedule: NoiseSchedule) -> np.ndarray:
    return np.array([t / schedule.T, np.sqrt(1.0 - schedule.abar(t))])


# --------------------------------------------------------------------------- GMM


@dataclass
class GMMDenoiser:
    """Exact MMSE denoiser for the prior ``sum_i w_i N(mu_i, Sigma_i)``."""

    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, k)
    covs: np.ndarray  # (K, k, k)
    backend: str = field(default="gmm", init=False)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.covs = np.asarray(self.covs, dtype=np.float64).reshape(len(self.weights), self.k, self.k)
        if abs(self.weights.sum() - 1.0) > 1e-8 or np.any(self.weights < 0):
            raise ValueError("mixture weights must be non-negative and sum to 1")
        evals, evecs = [], []
        for c in self.covs:
            if not np.allclose(c, c.T, atol=1e-10):
                raise ValueError("covariances must be symmetric")
            w, v = np.linalg.eigh(c)
            if w.min() <= 0:
                raise ValueError("covariances must be positive definite")
            evals.append(w)
            evecs.append(v)
        self._lam = np.stack(evals)  # (K, k)
        self._U = np.stack(evecs)  # (K, k, k)
        self._mu_rot = np.einsum("kj,kji->ki", self.means, self._U)

    @property
    def k(self) -> int:
        return self.means.shape[1]

    def _posterior(self, z: np.ndarray, ab):
        """Responsibilities (B, K), component posterior means (B, K, k),
        component posterior covariance eigenvalues (B, K, k) and joint
        log-weights (B, K). ``ab`` is a scalar or one value per row."""
        lam = self._lam[None]  # (1, K, k)
        ab = np.broadcast_to(np.asarray(ab, dtype=np.float64), (z.shape[0],))[:, None, None]
        var = ab * lam + (1.0 - ab)  # eigenvalues of the noised covariance
        proj = np.einsum("bj,kji->bki", z, self._U) - np.sqrt(ab) * self._mu_rot[None]
        logp = (
            np.log(self.weights)[None]
            - 0.5 * np.sum(proj**2 / var, axis=-1)
            - 0.5 * np.sum(np.log(var), axis=-1)
            - 0.5 * self.k * np.log(2 * np.pi)
        )
        resp = np.exp(logp - logsumexp(logp, axis=1, keepdims=True))
        gain = np.sqrt(ab) * lam / var
        comp_means = self.means[None] + np.einsum("kij,bkj->bki", self._U, gain * proj)
        post_lam = lam * (1.0 - ab) / var
        return resp, comp_means, post_lam, logp

    def log_density(self, z, ab: float) -> np.ndarray:
        """log p_t(z) of the noised mixture."""
        z2 = np.atleast_2d(np.asarray(z, dtype=np.float64))
        return logsumexp(self._posterior(z2, ab)[3], axis=1)

    def denoise_abar(self, z_t, ab) -> np.ndarray:
        z = np.asarray(z_t, dtype=np.float64)
        if not np.all(np.isfinite(z)):
            raise ValueError("non-finite z_t passed to denoiser")
        zb = np.atleast_2d(z)
        resp, cm, _, _ = self._posterior(zb, ab)
        out = np.einsum("bk,bki->bi", resp, cm)
        return out[0] if z.ndim == 1 else out

    def denoise(self, z_t, t, schedule: NoiseSchedule) -> np.ndarray:
        """Posterior mean; ``t`` may be an int or one timestep per row (0 allowed)."""
        if np.ndim(t) == 0:
            if t == 0:
                return np.array(z_t, dtype=np.float64)
            return self.denoise_abar(z_t, schedule.abar(int(t)))
        t = np.asarray(t)
        ab = np.where(t == 0, 1.0, schedule.alpha_bar[np.maximum(t, 1) - 1])
        out = self.denoise_abar(z_t, ab)
        out[t == 0] = np.asarray(z_t)[t == 0]
        return out

    def posterior_cov(self, z_t, ab: float) -> np.ndarray:
        """Cov[z0 | z_t] per row, shape (B, k, k)."""
        zb = np.atleast_2d(np.asarray(z_t, dtype=np.float64))
        resp, cm, post_lam, _ = self._posterior(zb, ab)
        comp_cov = np.einsum("kij,bkj,klj->bkil", self._U, post_lam, self._U)
        m = np.einsum("bk,bki->bi", resp, cm)
        second = np.einsum("bk,bkij->bij", resp, comp_cov) + np.einsum("bk,bki,bkj->bij", resp, cm, cm)
        return second - np.einsum("bi,bj->bij", m, m)

    def score(self, z_t, ab: float) -> np.ndarray:
        """Score of the noised density via Tweedie: (sqrt(abar) z0_hat - z_t)/(1 - abar)."""
        z = np.asarray(z_t, dtype=np.float64)
        return (np.sqrt(ab) * self.denoise_abar(z, ab) - z) / (1.0 - ab)

    def denoise_tensor(self, z_t: Tensor, t: int, schedule: NoiseSchedule) -> Tensor:
        """Tape-recorded posterior mean; Jacobian ``sqrt(abar)/(1-abar) Cov[z0|z_t]``."""
        ab = schedule.abar(t)
        z = z_t.data
        if not np.all(np.isfinite(z)):
            raise ValueError(f"non-finite z_t at t={t}")
        single = z.ndim == 1
        if ab == 1.0:
            return T.custom_op("denoise", (z_t,), z, lambda g: (g,))
        zb = np.atleast_2d(z)
        resp, cm, post_lam, _ = self._posterior(zb, ab)
        value = np.einsum("bk,bki->bi", resp, cm)
        c = np.sqrt(ab) / (1.0 - ab)
        U = self._U

        def vjp(g):
            gb = np.atleast_2d(g)
            # Cov[z0|z_t] g = sum_i r_i (S_i g + m_i m_i.g) - m m.g, S_i applied in its eigenbasis
            gu = np.einsum("kji,bj->bki", U, gb)
            cg = np.einsum("kij,bkj->bki", U, post_lam * gu)
            mg = np.einsum("bki,bi->bk", cm, gb)
            out = np.einsum("bk,bki->bi", resp, cg + cm * mg[..., None])
            out -= value * np.sum(value * gb, axis=1, keepdims=True)
            out *= c
            return (out[0] if single else out,)

        return T.custom_op("denoise", (z_t,), value[0] if single else value, vjp)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        comp = rng.choice(len(self.weights), size=n, p=self.weights)
        chol = np.linalg.cholesky(self.covs)
        eps = rng.standard_normal((n, self.k))
        return self.means[comp] + np.einsum("nij,nj->ni", chol[comp], eps)

    def prior_mean(self) -> np.ndarray:
        return self.weights @ self.means

    def prior_cov(self) -> np.ndarray:
        m = self.prior_mean()
        second = np.einsum("k,kij->ij", self.weights, self.covs) + np.einsum("k,ki,kj->ij", self.weights, self.means, self.means)
        return second - np.outer(m, m)


def fit_gmm(latents: np.ndarray, n_components: int = 8, reg_covar: float = 1e-4, seed: int = 0) -> GMMDenoiser:
    """Fit a full-covariance mixture to latents (EM via scikit-learn)."""
    from sklearn.mixture import GaussianMixture

    gm = GaussianMixture(n_components=n_components, covariance_type="full", reg_covar=reg_covar, random_state=seed, max_iter=300)
    gm.fit(latents)
    w = gm.weights_ / gm.weights_.sum()
    covs = (gm.covariances_ + np.transpose(gm.covariances_, (0, 2, 1))) / 2
    return GMMDenoiser(w, gm.means_, covs)


# --------------------------------------------------------------------------- MLP


@dataclass
class MLPDenoiser:
    """Noise predictor ``eps_theta(z_t, t)``; input is z_t plus (t/T, sqrt(1-abar_t))."""

    net: nn.MLP
    k: int
    backend: str = field(default="mlp", init=False)

    def _input(self, z: np.ndarray, t, schedule: NoiseSchedule) -> np.ndarray:
        zb = np.atleast_2d(z)
        t = np.broadcast_to(np.asarray(t), (zb.shape[0],))
        ab = np.where(t == 0, 1.0, schedule.alpha_bar[np.maximum(t, 1) - 1])
        return np.concatenate([zb, t[:, None] / schedule.T, np.sqrt(1.0 - ab)[:, None]], axis=1)

    def eps(self, z_t, t, schedule: NoiseSchedule) -> np.ndarray:
        z = np.asarray(z_t, dtype=np.float64)
        out = self.net(self._input(z, t, schedule))
        return out[0] if z.ndim == 1 else out

    def denoise(self, z_t, t, schedule: NoiseSchedule) -> np.ndarray:
        """``t`` may be an int or one timestep per row (0 means already clean)."""
        z = np.asarray(z_t, dtype=np.float64)
        if not np.all(np.isfinite(z)):
            raise ValueError(f"non-finite z_t at t={t}")
        tb = np.broadcast_to(np.asarray(t), z.shape[:-1])
        ab = np.where(tb == 0, 1.0, schedule.alpha_bar[np.maximum(tb, 1) - 1])[..., None]
        out = (z - np.sqrt(1.0 - ab) * self.eps(z, t, schedule)) / np.sqrt(ab)
        return np.where(tb[..., None] == 0, z, out)

    def denoise_tensor(self, z_t: Tensor, t: int, schedule: NoiseSchedule) -> Tensor:
        if not np.all(np.isfinite(z_t.data)):
            raise ValueError(f"non-finite z_t at t={t}")
        if t == 0:
            return z_t
        ab = schedule.abar(t)
        single = z_t.data.ndim == 1
        zb = z_t if not single else _as_row(z_t)
        cond = np.broadcast_to(_time_features(t, schedule), (zb.shape[0], 2))
        eps = self.net.forward(zb, tail=cond)
        out = T.scale(T.sub(zb, T.scale(eps, np.sqrt(1.0 - ab))), 1.0 / np.sqrt(ab))
        return _as_vec(out) if single else out


def _as_row(x: Tensor) -> Tensor:
    return T.custom_op("reshape", (x,), x.data.reshape(1, -1), lambda g: (g.reshape(-1),))


def _as_vec(x: Tensor) -> Tensor:
    shape = x.shape
    return T.custom_op("reshape", (x,), x.data.reshape(-1), lambda g: (g.reshape(shape),))


@dataclass
class DenoiserTrainConfig:
    steps: int = 4000
    batch_size: int = 256
    lr: float = 2e-3
    hidden: int = 256
    layers: int = 3
    activation: str = "tanh"
    seed: int = 0
    log_every: int = 500


def epsilon_loss(model: MLPDenoiser, z0: np.ndarray, schedule: NoiseSchedule, rng: np.random.Generator) -> float:
    """Mean per-coordinate squared noise-prediction error on a fresh draw."""
    t = rng.integers(1, schedule.T + 1, size=len(z0))
    ab = schedule.alpha_bar[t - 1][:, None]
    eps = rng.standard_normal(z0.shape)
    zt = np.sqrt(ab) * z0 + np.sqrt(1 - ab) * eps
    inp = np.concatenate([zt, t[:, None] / schedule.T, np.sqrt(1 - ab)], axis=1)
    return float(np.mean((model.net(inp) - eps) ** 2))


def train_mlp_denoiser(latents: np.ndarray, schedule: NoiseSchedule, cfg: DenoiserTrainConfig | None = None, history: list | None = None) -> MLPDenoiser:
    """Minimize E||eps - eps_theta(z_t, t)||^2 with Adam over random (z0, t, eps)."""
    cfg = cfg or DenoiserTrainConfig()
    latents = np.asarray(latents, dtype=np.float64)
    k = latents.shape[1]
    rng = np.random.default_rng(cfg.seed)
    sizes = [k + 2] + [cfg.hidden] * cfg.layers + [k]
    model = MLPDenoiser(nn.MLP.init(sizes, rng, cfg.activation), k)
    opt = nn.Adam(lr=cfg.lr)
    for step in range(cfg.steps):
        idx = rng.integers(0, len(latents), size=cfg.batch_size)
        z0 = latents[idx]
        t = rng.integers(1, schedule.T + 1, size=cfg.batch_size)
        ab = schedule.alpha_bar[t - 1][:, None]
        eps = rng.standard_normal(z0.shape)
        zt = np.sqrt(ab) * z0 + np.sqrt(1 - ab) * eps
        inp = Tensor(np.concatenate([zt, t[:, None] / schedule.T, np.sqrt(1 - ab)], axis=1))
        target = Tensor(eps)
        n_el = eps.size

        def loss_fn(fwd):
            r = T.sub(fwd(inp), target)
            return T.scale(T.sumsq(r), 1.0 / n_el)

        value = nn.train_step(model.net, opt, loss_fn, nn.cosine_lr(cfg.lr, step, cfg.steps))
        if not np.isfinite(value):
            raise DivergenceError(step)
        if history is not None:
            history.append(value)
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("denoiser step %d loss %.5f", step, value)
    return model


# --------------------------------------------------------------------------- sampling


def sample_prior(denoiser, schedule: NoiseSchedule, n: int, rng: np.random.Generator) -> np.ndarray:
    """Unguided ancestral sampling from ``z_T ~ N(0, I)`` down to ``z_0``."""
    z = rng.standard_normal((n, denoiser.k))
    for t in range(schedule.T, 0, -1):
        z = ancestral_step(z, denoiser.denoise(z, t, schedule), t, schedule, rng)
    return z
