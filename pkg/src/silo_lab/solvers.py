"""Posterior samplers in latent space.

``silo`` enforces measurement consistency entirely in latent space through the
learned operator; ``ldps``, ``gml`` and ``psld`` decode every step and
differentiate through the decoder and the pixel-space degradation; ``unguided``
is plain ancestral sampling.

All samplers run a batch of measurements at once. Each image owns its random
generator, so a reconstruction does not depend on which other images share
its batch.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .codec import LatentCodec
from .degradations import DegradationOp, Measurement, NonlinearOperatorError
from .diffusion import NoiseSchedule, ancestral_step, step_coefficients
from .tensor import Tape, Tensor

METHODS = ("silo", "ldps", "gml", "psld", "unguided")
DEFAULT_ETA = {"silo": 0.5, "ldps": 0.5, "gml": 0.5, "psld": 0.5, "unguided": 0.0}
SILO_INPAINT_ETA = 1.0
# baseline scales picked once on a 20-image validation split (mean PSNR)
DEFAULT_GAMMA = {"gml": 0.02, "psld": 0.02}


class SamplingError(RuntimeError):
    def __init__(self, t: int, method: str):
        self.t = t
        super().__init__(f"{method}: non-finite latent at t={t}")


@dataclass(frozen=True)
class SolverConfig:
    method: str = "silo"
    eta: float = 0.5
    gamma: float = 0.0
    seed: int = 0
    detach_denoiser: bool = False
    squared: bool = False  # bi-domain methods: squared residual norm instead of the plain norm
    steps: int | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.eta < 0 or self.gamma < 0:
            raise ValueError("eta and gamma must be non-negative")
        if self.method in ("silo", "ldps", "unguided") and self.gamma != 0.0:
            raise ValueError(f"gamma is not used by {self.method}")


@dataclass
class StepRecord:
    t: int
    guidance_norm: float
    step_ms: float


@dataclass
class ReconstructionTrace:
    x_hat: np.ndarray
    z0: np.ndarray
    records: list[StepRecord]
    seed: int
    method: str
    encoder_calls: int = 0
    decoder_calls: int = 0
    decoder_calls_in_loop: int = 0
    encoder_calls_in_loop: int = 0
    guidance_ops: set[str] = field(default_factory=set)

    @property
    def wall_time_s(self) -> float:
        return sum(r.step_ms for r in self.records) / 1000.0


@dataclass
class GuidanceContext:
    """Everything a guidance term needs besides the current latent."""

    method: str
    codec: LatentCodec
    denoiser: object
    schedule: NoiseSchedule
    op: DegradationOp | None = None
    operator: object = None
    y: np.ndarray | None = None  # (B, d') measurements
    w: np.ndarray | None = None  # (B, k) clamped encoded measurements
    sigma_y: float = 0.0
    eta: float = 0.5
    gamma: float = 0.0
    squared: bool = False
    detach_denoiser: bool = False
    aty: np.ndarray | None = None  # (B, d) A^T y for psld


def _residual_norm(r: Tensor, squared: bool) -> tuple[Tensor, np.ndarray]:
    norms = T.l2norm(r, axis=1)
    if squared:
        return T.sumsq(r), norms.data**2
    return T.tsum(norms), norms.data


def guidance_loss(ctx: GuidanceContext, z0h: Tensor, t: int) -> tuple[Tensor, np.ndarray]:
    """Scalar guidance objective (summed over the batch) and per-image residual norms."""
    if ctx.method == "silo":
        w_hat = ctx.operator.apply_tensor(z0h, t, ctx.sigma_y, ctx.schedule)
        norms = T.l2norm(T.sub(Tensor(ctx.w), w_hat), axis=1)
        return T.scale(T.tsum(norms), ctx.eta), norms.data
    x = ctx.codec.decode_tensor(z0h)
    ax = ctx.op.apply_tensor(x)
    data_term, norms = _residual_norm(T.sub(Tensor(ctx.y), ax), ctx.squared)
    loss = T.scale(data_term, ctx.eta)
    if ctx.method == "gml" and ctx.gamma > 0:
        fixed = T.sub(z0h, ctx.codec.encode_tensor(x))
        loss = T.add(loss, T.scale(T.sumsq(fixed), ctx.gamma))
    elif ctx.method == "psld" and ctx.gamma > 0:
        mat = ctx.op.as_matrix()
        atax = T.matmul(ax, Tensor(mat), op="adjoint")
        proj = T.add(T.sub(x, atax), Tensor(ctx.aty))
        fixed = T.sub(z0h, ctx.codec.encode_tensor(proj))
        loss = T.add(loss, T.scale(T.sumsq(fixed), ctx.gamma))
    return loss, norms


def guidance_value_and_grad(ctx: GuidanceContext, z: np.ndarray, t: int) -> tuple[float, np.ndarray, np.ndarray, np.ndarray, set[str]]:
    """Evaluate the guidance objective at latents ``z`` (B, k).

    Returns (objective, gradient w.r.t. z_t, z0_hat, per-image residual norms,
    op kinds in the gradient graph). With ``detach_denoiser`` the gradient is
    taken w.r.t. z0_hat and used in place of the z_t gradient.
    """
    with Tape() as tape:
        zt = tape.watch(Tensor(z))
        if ctx.detach_denoiser:
            z0h = tape.watch(Tensor(ctx.denoiser.denoise(z, t, ctx.schedule)))
            src = z0h
        else:
            z0h = ctx.denoiser.denoise_tensor(zt, t, ctx.schedule)
            src = zt
        loss, norms = guidance_loss(ctx, z0h, t)
    (grad,) = tape.gradient(loss, [src])
    return loss.item(), grad, np.array(z0h.data), norms, tape.graph_ops(loss)


def guidance_value(ctx: GuidanceContext, z: np.ndarray, t: int) -> float:
    """Objective only (no tape); used by finite-difference checks."""
    z0h = Tensor(ctx.denoiser.denoise(z, t, ctx.schedule))
    with T.no_tape():
        return guidance_loss(ctx, z0h, t)[0].item()


def _prepare(method: str, ys: np.ndarray, sigma_y: float, codec, denoiser, op, operator, schedule, cfg: SolverConfig) -> GuidanceContext:
    ctx = GuidanceContext(
        method=method,
        codec=codec,
        denoiser=denoiser,
        schedule=schedule,
        op=op,
        operator=operator,
        y=ys,
        sigma_y=sigma_y,
        eta=cfg.eta,
        gamma=cfg.gamma,
        squared=cfg.squared,
        detach_denoiser=cfg.detach_denoiser,
    )
    if method == "silo":
        if operator is None:
            raise ValueError("silo needs a trained latent operator")
        ctx.w = codec.encode_measure(op.lift(ys))
    elif method == "psld":
        if not op.linear:
            raise NonlinearOperatorError(op.kind)
        ctx.aty = ys @ op.as_matrix()
    return ctx


def reconstruct_batch(
    ys,
    sigma_y: float,
    codec: LatentCodec,
    denoiser,
    op: DegradationOp,
    schedule: NoiseSchedule,
    cfg: SolverConfig,
    operator=None,
    rngs: Sequence[np.random.Generator] | None = None,
    seeds: Sequence[int] | None = None,
    probe: Callable[[int, np.ndarray], None] | None = None,
) -> list[ReconstructionTrace]:
    """Run ``cfg.method`` on measurements ``ys`` (B, d').

    Per-image generators come from ``rngs`` or from ``seeds`` (default
    ``cfg.seed + i``). ``probe(t, z0_hat)`` is called once per step.
    """
    ys = np.atleast_2d(np.asarray(ys, dtype=np.float64))
    B = len(ys)
    if cfg.steps is not None and cfg.steps != schedule.T:
        raise ValueError(f"config steps={cfg.steps} but schedule has T={schedule.T}")
    if rngs is None:
        seeds = list(seeds) if seeds is not None else [cfg.seed + i for i in range(B)]
        rngs = [np.random.default_rng(s) for s in seeds]
    else:
        seeds = list(seeds) if seeds is not None else [cfg.seed] * B
    if len(rngs) != B:
        raise ValueError(f"{len(rngs)} generators for {B} measurements")
    method = cfg.method
    k = codec.k
    enc0, dec0 = codec.calls.encode, codec.calls.decode
    start = time.perf_counter()

    z = np.stack([r.standard_normal(k) for r in rngs])
    guided = method != "unguided"
    ctx = _prepare(method, ys, sigma_y, codec, denoiser, op, operator, schedule, cfg) if guided else None
    setup_ms = (time.perf_counter() - start) * 1000.0
    enc_setup, dec_setup = codec.calls.encode, codec.calls.decode

    records: list[list[StepRecord]] = [[] for _ in range(B)]
    ops_seen: set[str] = set()
    for t in range(schedule.T, 0, -1):
        t0 = time.perf_counter()
        if guided:
            _, grad, z0_hat, norms, kinds = guidance_value_and_grad(ctx, z, t)
            ops_seen |= kinds
        else:
            z0_hat = denoiser.denoise(z, t, schedule)
            grad, norms = None, np.zeros(B)
        if probe is not None:
            probe(t, z0_hat)
        std = step_coefficients(t, schedule)[2]
        noise = np.stack([r.standard_normal(k) for r in rngs]) if std > 0 else None
        z_next = ancestral_step(z, z0_hat, t, schedule, noise=noise)
        if grad is not None:
            z_next = z_next - grad
        if not np.all(np.isfinite(z_next)):
            raise SamplingError(t, method)
        z = z_next
        ms = (time.perf_counter() - t0) * 1000.0 / B
        for i in range(B):
            records[i].append(StepRecord(t, float(norms[i]), ms))

    enc_loop, dec_loop = codec.calls.encode - enc_setup, codec.calls.decode - dec_setup
    t_end = time.perf_counter()
    x_hat = codec.decode_image(z)
    final_ms = (time.perf_counter() - t_end) * 1000.0
    for i in range(B):
        records[i][0].step_ms += setup_ms / B
        records[i][-1].step_ms += final_ms / B
    enc_total, dec_total = codec.calls.encode - enc0, codec.calls.decode - dec0
    return [
        ReconstructionTrace(
            x_hat=x_hat[i],
            z0=z[i],
            records=records[i],
            seed=int(seeds[i]),
            method=method,
            encoder_calls=enc_total,
            decoder_calls=dec_total,
            decoder_calls_in_loop=dec_loop,
            encoder_calls_in_loop=enc_loop,
            guidance_ops=set(ops_seen),
        )
        for i in range(B)
    ]


def default_eta(method: str, op_kind: str) -> float:
    if method == "silo" and op_kind == "inpaint":
        return SILO_INPAINT_ETA
    return DEFAULT_ETA[method]


def default_gamma(method: str) -> float:
    return DEFAULT_GAMMA.get(method, 0.0)


def _single(measurement: Measurement, cfg: SolverConfig, rng, **kw) -> ReconstructionTrace:
    rngs = [rng] if rng is not None else None
    return reconstruct_batch(measurement.y, measurement.sigma_y, cfg=cfg, rngs=rngs, seeds=[cfg.seed], **kw)[0]


def solve_silo(measurement, codec, denoiser, operator, op, schedule, config: SolverConfig, rng=None) -> ReconstructionTrace:
    """Latent-only posterior sampling with the learned operator."""
    cfg = _with_method(config, "silo")
    return _single(measurement, cfg, rng, codec=codec, denoiser=denoiser, op=op, schedule=schedule, operator=operator)


def solve_ldps(measurement, codec, denoiser, op, schedule, config: SolverConfig, rng=None) -> ReconstructionTrace:
    cfg = _with_method(config, "ldps")
    return _single(measurement, cfg, rng, codec=codec, denoiser=denoiser, op=op, schedule=schedule)


def solve_gmldps(measurement, codec, denoiser, op, schedule, config: SolverConfig, rng=None) -> ReconstructionTrace:
    cfg = _with_method(config, "gml")
    return _single(measurement, cfg, rng, codec=codec, denoiser=denoiser, op=op, schedule=schedule)


def solve_psld(measurement, codec, denoiser, op, schedule, config: SolverConfig, rng=None) -> ReconstructionTrace:
    cfg = _with_method(config, "psld")
    return _single(measurement, cfg, rng, codec=codec, denoiser=denoiser, op=op, schedule=schedule)


def solve_unguided(measurement, codec, denoiser, op, schedule, config: SolverConfig, rng=None) -> ReconstructionTrace:
    cfg = _with_method(config, "unguided")
    return _single(measurement, cfg, rng, codec=codec, denoiser=denoiser, op=op, schedule=schedule)


def _with_method(cfg: SolverConfig, method: str) -> SolverConfig:
    if cfg.method == method:
        return cfg
    gamma = cfg.gamma if method in ("gml", "psld") else 0.0
    return SolverConfig(method, cfg.eta, gamma, cfg.seed, cfg.detach_denoiser, cfg.squared, cfg.steps)


# --------------------------------------------------------------------------- diagnostics


@dataclass
class GradientField:
    t: int
    grad: np.ndarray  # (k,) gradient w.r.t. z0_hat
    pixels: np.ndarray  # (d,) the gradient viewed through the decoder basis
    norm: float
    max_abs: float


def decoder_likelihood_gradient(codec: LatentCodec, op: DegradationOp, y: np.ndarray, z0_hat: np.ndarray) -> np.ndarray:
    """grad_{z0_hat} ||y - A(D(z0_hat))||^2 by reverse mode through the decoder."""
    with Tape() as tape:
        z = tape.watch(Tensor(z0_hat))
        r = T.sub(Tensor(y), op.apply_tensor(codec.decode_tensor(z)))
        loss = T.sumsq(r)
    return tape.gradient(loss, [z])[0]


def decoder_gradient_diagnostic(
    measurement: Measurement,
    codec: LatentCodec,
    denoiser,
    op: DegradationOp,
    schedule: NoiseSchedule,
    timesteps: Sequence[int],
    config: SolverConfig | None = None,
) -> tuple[list[GradientField], ReconstructionTrace]:
    """Record the likelihood gradient through the decoder during an LDPS run."""
    cfg = _with_method(config or SolverConfig("ldps"), "ldps")
    wanted = set(int(t) for t in timesteps)
    fields: list[GradientField] = []
    y = np.asarray(measurement.y, dtype=np.float64)

    def probe(t, z0_hat):
        if t in wanted:
            g = decoder_likelihood_gradient(codec, op, y, z0_hat[0])
            fields.append(GradientField(t, g, codec.basis @ g, float(np.linalg.norm(g)), float(np.max(np.abs(g)))))

    trace = reconstruct_batch(y, measurement.sigma_y, codec, denoiser, op, schedule, cfg, seeds=[cfg.seed], probe=probe)[0]
    return fields, trace


# --------------------------------------------------------------------------- timing


def benchmark(
    configs: dict[str, SolverConfig],
    ys,
    sigma_y: float,
    codec: LatentCodec,
    denoiser,
    op: DegradationOp,
    schedule: NoiseSchedule,
    operator=None,
    repeats: int = 3,
    seed: int = 0,
) -> dict[str, dict]:
    """Matched-seed wall-time comparison.

    Each repeat runs every method once over the same measurements, in
    rotating order so slow drift on a shared machine hits all methods alike.
    A method's per-image time is the batch wall time divided by the number of
    images; the best repeat is kept (the usual timeit convention).
    """
    ys = np.atleast_2d(np.asarray(ys, dtype=np.float64))
    names = list(configs)
    seeds = [seed + i for i in range(len(ys))]
    runs: dict[str, list[float]] = {m: [] for m in names}
    for r in range(repeats):
        order = names[r % len(names) :] + names[: r % len(names)]
        for m in order:
            traces = reconstruct_batch(ys, sigma_y, codec, denoiser, op, schedule, configs[m], operator=operator, seeds=seeds)
            runs[m].append(float(np.mean([tr.wall_time_s for tr in traces])))
    return {m: {"per_image_s": min(v), "repeats_s": v} for m, v in runs.items()}
