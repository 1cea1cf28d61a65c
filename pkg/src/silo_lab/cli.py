"""Command-line pipeline: data, training, reconstruction, evaluation.

Layout under the output root::

    models/<model-hash>/           dataset.silo codec.silo denoiser.silo config.ini
    models/<model-hash>/operators/ <kind>-<variant>-<hash>.silo
    runs/<run-hash>/               config.ini recon.silo images/ traces/ summary.jsonl
    bench/<run-hash>/              bench.jsonl
    diagnose/<run-hash>/           fields.jsonl fields/

Hashes cover only the config sections that influence each artifact, so
changing the solver never retrains a model.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint, config, data, degradations, diffusion, metrics, operator, solvers, store
from .codec import encode_decode_report, fit
from .config import ExperimentConfig

log = logging.getLogger("silo_lab")


class RunExistsError(FileExistsError):
    pass


# ------------------------------------------------------------------ workspace


@dataclass(frozen=True)
class Workspace:
    cfg: ExperimentConfig

    @property
    def root(self) -> Path:
        return self.cfg.output_root()

    @property
    def model_dir(self) -> Path:
        return self.root / "models" / config.config_hash(self.cfg, config.MODEL_SECTIONS)

    @property
    def dataset_path(self) -> Path:
        return self.model_dir / "dataset.silo"

    @property
    def codec_path(self) -> Path:
        return self.model_dir / "codec.silo"

    @property
    def denoiser_path(self) -> Path:
        return self.model_dir / "denoiser.silo"

    @property
    def operator_path(self) -> Path:
        c = self.cfg
        h = config.config_hash(c, ("operator", "degradation"))
        return self.model_dir / "operators" / f"{c.degradation.kind}-{c.operator.variant}-{h}.silo"

    def run_hash(self) -> str:
        return config.config_hash(self.cfg, config.RUN_SECTIONS)

    def run_dir(self, kind: str = "runs") -> Path:
        return self.root / kind / self.run_hash()

    # -- loading, each checks its prerequisites and dimensions

    def schedule(self) -> diffusion.NoiseSchedule:
        s = self.cfg.schedule
        return diffusion.make_schedule(s.T, s.beta_start, s.beta_end)

    def op(self) -> degradations.DegradationOp:
        d = self.cfg.degradation
        return degradations.make_op(
            d.kind,
            self.cfg.data.image_size,
            kernel_size=d.kernel_size,
            kernel_sigma=d.kernel_sigma,
            factor=d.factor,
            box=d.box,
            fill=d.fill,
            quality=d.quality,
        )

    def dataset(self) -> data.Dataset:
        p = self.dataset_path
        return store.dataset_from_ckpt(store.read(p, "dataset", "gen-data"), p)

    def codec(self):
        p = self.codec_path
        return store.codec_from_ckpt(store.read(p, "codec", "train-ae"), p, d=self.cfg.data.image_size**2)

    def denoiser(self, k: int):
        p = self.denoiser_path
        return store.denoiser_from_ckpt(store.read(p, "denoiser", "train-denoiser"), p, k=k)

    def operator(self, k: int):
        p = self.operator_path
        hint = f"train-operator --degradation {self.cfg.degradation.kind} --operator-variant {self.cfg.operator.variant}"
        model = store.operator_from_ckpt(store.read(p, "operator", hint), p, k=k, T=self.cfg.schedule.T)
        if model.op_kind != self.cfg.degradation.kind:
            raise checkpoint.CheckpointError(f"{p}: operator was trained for {model.op_kind}, not {self.cfg.degradation.kind}")
        return model


def _guard(path: Path, force: bool) -> None:
    if path.exists():
        if not force:
            raise RunExistsError(f"{path} already exists for this config; pass --force to overwrite")
        if path.is_dir():
            shutil.rmtree(path)
        else:
            path.unlink()


def _write_config(path: Path, cfg: ExperimentConfig, sections=None) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(config.dumps(cfg, sections), encoding="utf-8")


# ------------------------------------------------------------------ measurement & solving


def measurements(cfg: ExperimentConfig, op, images: np.ndarray) -> np.ndarray:
    """Noisy measurements of ``images``; image ``i`` uses ``noise_seed + i``."""
    m = cfg.measurement
    return np.stack(
        [degradations.measure(op, x, m.sigma_y, seed=m.noise_seed + i).y for i, x in enumerate(images)]
    )


def solver_config(cfg: ExperimentConfig) -> solvers.SolverConfig:
    s = cfg.solver
    eta = solvers.default_eta(s.method, cfg.degradation.kind) if s.eta is None else s.eta
    gamma = solvers.default_gamma(s.method) if s.gamma is None else s.gamma
    if s.method not in ("gml", "psld"):
        gamma = 0.0
    return solvers.SolverConfig(s.method, eta, gamma, s.seed, s.detach_denoiser, s.squared, cfg.schedule.T)


def _chunk_worker(args) -> list[dict]:
    cfg_text, indices = args
    cfg = config.loads(cfg_text)
    return _reconstruct(cfg, indices)


def _reconstruct(cfg: ExperimentConfig, indices: list[int]) -> list[dict]:
    ws = Workspace(cfg)
    ds = ws.dataset()
    codec = ws.codec()
    den = ws.denoiser(codec.k)
    sch = ws.schedule()
    op = ws.op()
    scfg = solver_config(cfg)
    op_model = ws.operator(codec.k) if scfg.method == "silo" else None
    ys = measurements(cfg, op, ds.test)[indices]
    traces = solvers.reconstruct_batch(
        ys, cfg.measurement.sigma_y, codec, den, op, sch, scfg, operator=op_model, seeds=[scfg.seed + i for i in indices]
    )
    return [{"index": i, "trace": tr} for i, tr in zip(indices, traces)]


def run_reconstruction(cfg: ExperimentConfig, jobs: int = 1) -> list[dict]:
    """Reconstruct the first ``solver.n_images`` test images.

    Every image has its own generator (``solver.seed + index``), so the split
    across workers only changes results at the level of float rounding (BLAS
    kernels differ by batch size). A fixed ``jobs`` value is bit-reproducible.
    """
    n = min(cfg.solver.n_images, cfg.data.test_count)
    indices = list(range(n))
    if jobs <= 1 or n <= 1:
        return _reconstruct(cfg, indices)
    chunks = [c.tolist() for c in np.array_split(np.array(indices), min(jobs, n))]
    text = config.dumps(cfg)
    with ProcessPoolExecutor(max_workers=len(chunks)) as pool:
        parts = list(pool.map(_chunk_worker, [(text, c) for c in chunks]))
    return sorted((r for part in parts for r in part), key=lambda r: r["index"])


# ------------------------------------------------------------------ subcommands


def cmd_gen_data(cfg: ExperimentConfig, args) -> int:
    ws = Workspace(cfg)
    _guard(ws.dataset_path, args.force)
    d = cfg.data
    ds = data.generate(data.DatasetSpec(d.image_size, d.train_count, d.test_count, d.master_seed))
    checkpoint.save(store.dataset_to_ckpt(ds), ws.dataset_path)
    _write_config(ws.model_dir / "config.ini", cfg, config.MODEL_SECTIONS)
    sample_dir = ws.model_dir / "test_images"
    sample_dir.mkdir(exist_ok=True)
    for i, x in enumerate(ds.test):
        data.write_image(x.reshape(d.image_size, d.image_size), sample_dir / f"{i:04d}.pgm")
    print(f"dataset: {len(ds.train)} train / {len(ds.test)} test images -> {ws.dataset_path}")
    return 0


def cmd_train_ae(cfg: ExperimentConfig, args) -> int:
    ws = Workspace(cfg)
    ds = ws.dataset()
    _guard(ws.codec_path, args.force)
    codec = fit(ds.train, cfg.codec.k)
    checkpoint.save(store.codec_to_ckpt(codec), ws.codec_path)
    ops = {k: degradations.make_op(k, cfg.data.image_size) for k in degradations.KINDS if k != "identity"}
    rows = encode_decode_report(codec, ds.test, ops, cfg.measurement.sigma_y, seed=cfg.measurement.noise_seed)
    print(f"codec: k={codec.k} orthonormality error {codec.orthonormality_error():.2e} lipschitz {codec.lipschitz():.6f}")
    print(f"{'degradation':<12}{'x,f(x)':>10}{'ynl,f(ynl)':>12}{'y,f(y)':>10}{'ynl,f(y)':>10}")
    for r in rows:
        print(f"{r['degradation']:<12}{r['x_fx']:>10.2f}{r['ynl_fynl']:>12.2f}{r['y_fy']:>10.2f}{r['ynl_fy']:>10.2f}")
    return 0


def cmd_train_denoiser(cfg: ExperimentConfig, args) -> int:
    ws = Workspace(cfg)
    ds = ws.dataset()
    codec = ws.codec()
    _guard(ws.denoiser_path, args.force)
    dn = cfg.denoiser
    z = codec.encode(ds.train)
    if dn.backend == "gmm":
        den = diffusion.fit_gmm(z, dn.n_components, dn.reg_covar, dn.seed)
    elif dn.backend == "mlp":
        tc = diffusion.DenoiserTrainConfig(dn.steps, dn.batch_size, dn.lr, dn.hidden, dn.layers, seed=dn.seed)
        den = diffusion.train_mlp_denoiser(z, ws.schedule(), tc)
    else:
        raise config.ConfigError(f"[denoiser] backend must be gmm or mlp, got {dn.backend!r}")
    checkpoint.save(store.denoiser_to_ckpt(den), ws.denoiser_path)
    print(f"denoiser ({dn.backend}) -> {ws.denoiser_path}")
    return 0


def cmd_train_operator(cfg: ExperimentConfig, args) -> int:
    ws = Workspace(cfg)
    ds = ws.dataset()
    codec = ws.codec()
    den = ws.denoiser(codec.k)
    _guard(ws.operator_path, args.force)
    o = cfg.operator
    tc = operator.OperatorTrainConfig(
        variant=o.variant,
        steps=o.steps,
        batch_size=o.batch_size,
        lr=o.lr,
        width_factor=o.width_factor,
        sigma_choices=o.sigma_choices,
        clamp_target=o.clamp_target,
        skip=o.skip,
        seed=o.seed,
    )
    history: list[float] = []
    model = operator.train_operator(codec, den, ws.op(), ws.schedule(), ds.train, tc, history)
    checkpoint.save(store.operator_to_ckpt(model), ws.operator_path)
    print(f"operator {cfg.degradation.kind}/{o.variant}: loss {history[0]:.4f} -> {history[-1]:.4f} ({o.steps} steps) -> {ws.operator_path}")
    return 0


def cmd_reconstruct(cfg: ExperimentConfig, args) -> int:
    ws = Workspace(cfg)
    # check prerequisites before touching the run directory
    codec = ws.codec()
    ws.denoiser(codec.k)
    if cfg.solver.method == "silo":
        ws.operator(codec.k)
    out = ws.run_dir()
    _guard(out, args.force)
    results = run_reconstruction(cfg, args.jobs)
    (out / "images").mkdir(parents=True)
    (out / "traces").mkdir()
    _write_config(out / "config.ini", cfg)
    size = cfg.data.image_size
    x_hat = np.stack([r["trace"].x_hat for r in results])
    z0 = np.stack([r["trace"].z0 for r in results])
    idx = np.array([r["index"] for r in results], dtype=np.float64)
    for r in results:
        tr = r["trace"]
        data.write_image(tr.x_hat.reshape(size, size), out / "images" / f"{r['index']:04d}.pgm")
        with open(out / "traces" / f"{r['index']:04d}.jsonl", "w", encoding="utf-8") as fh:
            for rec in tr.records:
                fh.write(json.dumps({"t": rec.t, "guidance_norm": rec.guidance_norm, "step_ms": rec.step_ms}) + "\n")
    times = [r["trace"].wall_time_s for r in results]
    checkpoint.save(
        checkpoint.Checkpoint({"x_hat": x_hat, "z0": z0, "index": idx, "time_s": np.array(times)}, {"kind": "reconstruction", "method": cfg.solver.method}),
        out / "recon.silo",
    )
    first = results[0]["trace"]
    summary = {
        "run": ws.run_hash(),
        "method": cfg.solver.method,
        "degradation": cfg.degradation.kind,
        "sigma_y": cfg.measurement.sigma_y,
        "n": len(results),
        "time_mean_s": float(np.mean(times)),
        # codec calls of one batched solver call (a call may cover many images)
        "encoder_calls": first.encoder_calls,
        "decoder_calls": first.decoder_calls,
        "decoder_calls_in_loop": first.decoder_calls_in_loop,
    }
    with open(out / "summary.jsonl", "a", encoding="utf-8") as fh:
        fh.write(json.dumps(summary) + "\n")
    print(f"{cfg.solver.method} on {cfg.degradation.kind}: {len(results)} images, {summary['time_mean_s']:.3f}s/image -> {out}")
    return 0


def load_reconstruction(run_dir: Path) -> checkpoint.Checkpoint:
    p = run_dir / "recon.silo"
    if not p.exists():
        raise store.MissingCheckpointError("reconstruction", p, "reconstruct")
    return checkpoint.load(p)


def cmd_evaluate(cfg: ExperimentConfig, args) -> int:
    runs = [Path(r) for r in args.run] if args.run else [Workspace(cfg).run_dir()]
    reports = []
    for run in runs:
        run_cfg = config.load(run / "config.ini") if (run / "config.ini").exists() else cfg
        ws = Workspace(run_cfg)
        rec = load_reconstruction(run)
        ds = ws.dataset()
        codec = ws.codec()
        idx = rec.arrays["index"].astype(int)
        report = metrics.evaluate_run(
            rec.arrays["x_hat"],
            ds.test[idx],
            ws.op(),
            codec,
            method=rec.meta.get("method", run_cfg.solver.method),
            times=rec.arrays["time_s"],
        )
        report.write_jsonl(run / "report.jsonl")
        reports.append(report)
    print(metrics.render_table(reports))
    return 0


def cmd_diagnose(cfg: ExperimentConfig, args) -> int:
    ws = Workspace(cfg.replace("solver", method="ldps"))
    ds = ws.dataset()
    codec = ws.codec()
    den = ws.denoiser(codec.k)
    op = ws.op()
    if not op.linear:
        raise degradations.NonlinearOperatorError(op.kind)
    out = ws.run_dir("diagnose")
    _guard(out, args.force)
    i = args.index
    y = measurements(ws.cfg, op, ds.test[i : i + 1])[0]
    meas = degradations.Measurement(y, ws.cfg.measurement.sigma_y, op.kind, ws.cfg.measurement.noise_seed + i)
    T = ws.cfg.schedule.T
    steps = sorted(set(int(t) for t in np.linspace(1, T, args.timesteps).round()))
    fields, _ = solvers.decoder_gradient_diagnostic(meas, codec, den, op, ws.schedule(), steps, solver_config(ws.cfg))
    (out / "fields").mkdir(parents=True)
    size = ws.cfg.data.image_size
    with open(out / "fields.jsonl", "w", encoding="utf-8") as fh:
        for f in fields:
            fh.write(json.dumps({"t": f.t, "norm": f.norm, "max_abs": f.max_abs, "grad": f.grad.tolist()}) + "\n")
            scale = np.max(np.abs(f.pixels)) or 1.0
            data.write_image((f.pixels / scale).reshape(size, size), out / "fields" / f"t{f.t:04d}.pgm")
    print(f"{'t':>6}{'norm':>14}{'max_abs':>14}")
    for f in fields:
        print(f"{f.t:>6}{f.norm:>14.6g}{f.max_abs:>14.6g}")
    print(f"-> {out}")
    return 0


def cmd_bench(cfg: ExperimentConfig, args) -> int:
    ws = Workspace(cfg)
    ds = ws.dataset()
    codec = ws.codec()
    den = ws.denoiser(codec.k)
    op = ws.op()
    methods = [m for m in cfg.bench.methods if op.linear or m != "psld"]
    op_model = ws.operator(codec.k) if "silo" in methods else None
    out = ws.run_dir("bench")
    _guard(out, args.force)
    n = min(cfg.bench.n_images, cfg.data.test_count)
    ys = measurements(cfg, op, ds.test[:n])
    configs = {m: solver_config(cfg.replace("solver", method=m, eta=None if m != cfg.solver.method else cfg.solver.eta)) for m in methods}
    res = solvers.benchmark(configs, ys, cfg.measurement.sigma_y, codec, den, op, ws.schedule(), op_model, cfg.bench.repeats, cfg.solver.seed)
    out.mkdir(parents=True)
    _write_config(out / "config.ini", cfg)
    base = res.get("silo", {}).get("per_image_s")
    with open(out / "bench.jsonl", "w", encoding="utf-8") as fh:
        for m, r in res.items():
            rec = {"method": m, "degradation": op.kind, "T": cfg.schedule.T, "n": n, **r}
            if base:
                rec["ratio_vs_silo"] = r["per_image_s"] / base
            fh.write(json.dumps(rec) + "\n")
    print(f"{'method':<10}{'s/image':>10}{'vs silo':>10}")
    for m, r in res.items():
        ratio = f"{r['per_image_s'] / base:>10.2f}" if base else f"{'-':>10}"
        print(f"{m:<10}{r['per_image_s']:>10.4f}{ratio}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-ae": cmd_train_ae,
    "train-denoiser": cmd_train_denoiser,
    "train-operator": cmd_train_operator,
    "reconstruct": cmd_reconstruct,
    "evaluate": cmd_evaluate,
    "diagnose": cmd_diagnose,
    "bench": cmd_bench,
}


# ------------------------------------------------------------------ argument handling

HELP = {
    "gen-data": "render the synthetic train/test images",
    "train-ae": "fit the PCA codec and print its encode-decode table",
    "train-denoiser": "fit the latent prior (GMM or MLP backend)",
    "train-operator": "train the latent operator for the configured degradation",
    "reconstruct": "solve the inverse problem on the first n test images",
    "evaluate": "PSNR, CPSNR and Frechet proxy for one or more runs",
    "diagnose": "record decoder-gradient fields during an LDPS run",
    "bench": "matched-seed wall-time comparison of the solvers",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="sectioned key = value config file; missing keys take defaults")
    common.add_argument("--seed", type=int, help="solver seed; image i uses seed + i")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for reconstruct")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs for this config")
    common.add_argument("--method", choices=solvers.METHODS)
    common.add_argument("--eta", type=float)
    common.add_argument("--sigma-y", type=float, dest="sigma_y")
    common.add_argument("--degradation", choices=degradations.KINDS)
    common.add_argument("--operator-variant", choices=operator.VARIANTS, dest="operator_variant")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="silo-lab", description="Latent-diffusion inverse-problem lab.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common], help=HELP[name])
        if name == "evaluate":
            p.add_argument("--run", action="append", help="run directory to evaluate (repeatable)")
        if name == "diagnose":
            p.add_argument("--index", type=int, default=0, help="test image index")
            p.add_argument("--timesteps", type=int, default=11, help="number of evenly spaced timesteps to record")
    return parser


def resolve_config(args) -> ExperimentConfig:
    cfg = config.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.replace("solver", seed=args.seed)
    if args.method is not None:
        cfg = cfg.replace("solver", method=args.method)
    if args.eta is not None:
        cfg = cfg.replace("solver", eta=args.eta)
    if args.sigma_y is not None:
        cfg = cfg.replace("measurement", sigma_y=args.sigma_y)
    if args.degradation is not None:
        cfg = cfg.replace("degradation", kind=args.degradation)
    if args.operator_variant is not None:
        cfg = cfg.replace("operator", variant=args.operator_variant)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        t0 = time.perf_counter()
        code = COMMANDS[args.command](cfg, args)
        log.info("%s finished in %.1fs", args.command, time.perf_counter() - t0)
        return code
    except (
        config.ConfigError,
        checkpoint.CheckpointError,
        store.MissingCheckpointError,
        RunExistsError,
        degradations.NonlinearOperatorError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
