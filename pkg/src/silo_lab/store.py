"""Conversion between trained objects and checkpoints."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import nn
from .checkpoint import Checkpoint, CheckpointError, load
from .codec import LatentCodec
from .data import Dataset, DatasetSpec
from .diffusion import GMMDenoiser, MLPDenoiser
from .operator import LatentOperatorModel


class MissingCheckpointError(FileNotFoundError):
    def __init__(self, what: str, path: Path, hint: str):
        self.path = path
        super().__init__(f"missing {what} checkpoint {path}; run `silo-lab {hint}` first")


def _require(ckpt: Checkpoint, kind: str, path) -> None:
    found = ckpt.meta.get("kind")
    if found != kind:
        raise CheckpointError(f"{path}: expected a {kind} checkpoint, found {found!r}")


def _mlp_arrays(net: nn.MLP, prefix: str = "") -> dict[str, np.ndarray]:
    out = {}
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        out[f"{prefix}w{i}"] = w
        out[f"{prefix}b{i}"] = b
    if net.skip is not None:
        out[f"{prefix}skip"] = net.skip
    return out


def _mlp_from(ckpt: Checkpoint, activation: str, prefix: str = "") -> nn.MLP:
    n = int(ckpt.meta["layers"])
    weights = [ckpt.arrays[f"{prefix}w{i}"] for i in range(n)]
    biases = [ckpt.arrays[f"{prefix}b{i}"] for i in range(n)]
    return nn.MLP(weights, biases, activation, ckpt.arrays.get(f"{prefix}skip"))


# ---------------------------------------------------------------- dataset


def dataset_to_ckpt(ds: Dataset) -> Checkpoint:
    s = ds.spec
    meta = {
        "kind": "dataset",
        "image_size": str(s.image_size),
        "train_count": str(s.train_count),
        "test_count": str(s.test_count),
        "master_seed": str(s.master_seed),
    }
    return Checkpoint({"train": ds.train, "test": ds.test}, meta)


def dataset_from_ckpt(ckpt: Checkpoint, path="<dataset>") -> Dataset:
    _require(ckpt, "dataset", path)
    m = ckpt.meta
    spec = DatasetSpec(int(m["image_size"]), int(m["train_count"]), int(m["test_count"]), int(m["master_seed"]))
    return Dataset(
        spec,
        ckpt.arrays["train"],
        ckpt.arrays["test"],
        tuple(spec.master_seed + i for i in spec.train_indices),
        tuple(spec.master_seed + i for i in spec.test_indices),
    )


# ---------------------------------------------------------------- codec


def codec_to_ckpt(codec: LatentCodec) -> Checkpoint:
    arrays = {"mean": codec.mean, "basis": codec.basis}
    if codec.enc_basis is not codec.basis:
        arrays["enc_basis"] = codec.enc_basis
    return Checkpoint(arrays, {"kind": "codec", "d": str(codec.d), "k": str(codec.k)})


def codec_from_ckpt(ckpt: Checkpoint, path="<codec>", d: int | None = None) -> LatentCodec:
    _require(ckpt, "codec", path)
    codec = LatentCodec(ckpt.arrays["mean"], ckpt.arrays["basis"], ckpt.arrays.get("enc_basis"))
    if d is not None and codec.d != d:
        raise CheckpointError(f"{path}: codec expects {codec.d} pixels but the dataset has {d}; retrain with --force")
    return codec


# ---------------------------------------------------------------- denoiser


def denoiser_to_ckpt(den) -> Checkpoint:
    if isinstance(den, GMMDenoiser):
        return Checkpoint(
            {"weights": den.weights, "means": den.means, "covs": den.covs},
            {"kind": "denoiser", "backend": "gmm", "k": str(den.k)},
        )
    meta = {"kind": "denoiser", "backend": "mlp", "k": str(den.k), "layers": str(len(den.net.weights)), "activation": den.net.activation}
    return Checkpoint(_mlp_arrays(den.net), meta)


def denoiser_from_ckpt(ckpt: Checkpoint, path="<denoiser>", k: int | None = None):
    _require(ckpt, "denoiser", path)
    dk = int(ckpt.meta["k"])
    if k is not None and dk != k:
        raise CheckpointError(f"{path}: denoiser latent dim {dk} does not match codec k={k}; retrain with --force")
    if ckpt.meta["backend"] == "gmm":
        a = ckpt.arrays
        return GMMDenoiser(a["weights"], a["means"], a["covs"])
    return MLPDenoiser(_mlp_from(ckpt, ckpt.meta["activation"]), dk)


# ---------------------------------------------------------------- operator


def operator_to_ckpt(model: LatentOperatorModel) -> Checkpoint:
    meta = {
        "kind": "operator",
        "variant": model.variant,
        "k": str(model.k),
        "T": str(model.T),
        "op_kind": model.op_kind,
        "layers": str(len(model.net.weights)),
        "activation": model.net.activation,
    }
    return Checkpoint(_mlp_arrays(model.net), meta)


def operator_from_ckpt(ckpt: Checkpoint, path="<operator>", k: int | None = None, T: int | None = None) -> LatentOperatorModel:
    _require(ckpt, "operator", path)
    m = ckpt.meta
    model = LatentOperatorModel(_mlp_from(ckpt, m["activation"]), int(m["k"]), m["variant"], int(m["T"]), m["op_kind"])
    if k is not None and model.k != k:
        raise CheckpointError(f"{path}: operator latent dim {model.k} does not match codec k={k}; retrain with --force")
    if T is not None and model.T != T:
        raise CheckpointError(f"{path}: operator trained for T={model.T} but the schedule has T={T}; retrain with --force")
    return model


def read(path: str | Path, what: str, hint: str) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise MissingCheckpointError(what, path, hint)
    return load(path)
