"""Small multilayer perceptrons on the gradient tape, plus an Adam optimizer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class MLP:
    """Fully connected net; hidden layers use ``activation``, output is linear.

    With ``skip=True`` an extra linear map from the first ``skip_dim`` input
    features to the output is added, so affine maps are representable exactly.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "tanh"
    skip: np.ndarray | None = None

    @classmethod
    def init(
        cls,
        sizes: list[int],
        rng: np.random.Generator,
        activation: str = "tanh",
        skip_dim: int | None = None,
    ) -> "MLP":
        weights, biases = [], []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            std = np.sqrt(1.0 / fan_in)
            if i == len(sizes) - 2:
                std *= 0.1
            weights.append(rng.normal(0.0, std, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        skip = None
        if skip_dim is not None:
            skip = np.zeros((skip_dim, sizes[-1]))
        return cls(weights, biases, activation, skip)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def parameters(self) -> list[np.ndarray]:
        params = [*self.weights, *self.biases]
        if self.skip is not None:
            params.append(self.skip)
        return params

    def set_parameters(self, params: list[np.ndarray]) -> None:
        n = len(self.weights)
        self.weights = [np.asarray(p, dtype=np.float64) for p in params[:n]]
        self.biases = [np.asarray(p, dtype=np.float64) for p in params[n : 2 * n]]
        if self.skip is not None:
            self.skip = np.asarray(params[2 * n], dtype=np.float64)

    def forward(self, x: Tensor, params: list[Tensor] | None = None, tail: np.ndarray | None = None) -> Tensor:
        """Tape-recorded forward pass as a single ``mlp`` node.

        ``params`` overrides the stored weights so training can track them on
        the tape. Otherwise weights enter as constants and only the input
        gradient is formed; ``tail`` then holds constant trailing input
        features (rows matching ``x``, or a single row shared by all of them)
        that are folded into the first bias.
        """
        if params is None:
            return self._forward_const(x, tail)
        if x.shape[-1] != self.in_dim:
            raise T.ShapeError("mlp", x.shape, (self.in_dim,))
        n = len(self.weights)
        ws = [p.data for p in params[:n]]
        bs = [p.data for p in params[n : 2 * n]]
        skip = params[2 * n].data if self.skip is not None else None
        tanh = self.activation == "tanh"
        xd = x.data
        hs = [xd]  # layer inputs
        h = xd
        for i in range(n):
            h = h @ ws[i] + bs[i]
            if i < n - 1:
                h = np.tanh(h) if tanh else np.maximum(h, 0.0)
                hs.append(h)
        if skip is not None:
            k = skip.shape[0]
            h = h + xd[..., :k] @ skip

        def vjp(g):
            gw, gb = [None] * n, [None] * n
            g_skip = gx_skip = None
            if skip is not None:
                k = skip.shape[0]
                g_skip = xd[..., :k].reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
                gx_skip = g @ skip.T
            for i in range(n - 1, -1, -1):
                inp = hs[i]
                gw[i] = inp.reshape(-1, inp.shape[-1]).T @ g.reshape(-1, g.shape[-1])
                gb[i] = g.reshape(-1, g.shape[-1]).sum(axis=0)
                g = g @ ws[i].T
                if i > 0:
                    a = hs[i]
                    g = g * (1.0 - a * a) if tanh else g * (a > 0)
            if gx_skip is not None:
                g = g.copy()
                g[..., : gx_skip.shape[-1]] += gx_skip
            grads = [g, *gw, *gb]
            if skip is not None:
                grads.append(g_skip)
            return tuple(grads)

        return T.custom_op("mlp", (x, *params), h, vjp)

    def _fused_first(self, m: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, list[np.ndarray]]:
        """Cached constants for the const-weight path: first-layer weights for
        the leading ``m`` inputs with the skip map appended as extra columns,
        its transpose, the tail rows of the first layer, and the transposes of
        the later layers."""
        key = (m, *map(id, self.weights), id(self.skip))
        cached = self.__dict__.get("_fused")
        if cached is None or cached[0] != key:
            w = self.weights[0][:m]
            if self.skip is not None:
                w = np.concatenate([w, np.pad(self.skip, ((0, m - self.skip.shape[0]), (0, 0)))], axis=1)
            w = np.ascontiguousarray(w)
            later_t = [np.ascontiguousarray(wi.T) for wi in self.weights[1:]]
            cached = (key, w, np.ascontiguousarray(w.T), np.ascontiguousarray(self.weights[0][m:]), later_t)
            self.__dict__["_fused"] = cached
        return cached[1:]

    def _forward_const(self, x: Tensor, tail: np.ndarray | None) -> Tensor:
        xd = x.data
        m = xd.shape[-1]
        n_tail = 0 if tail is None else tail.shape[-1]
        if m + n_tail != self.in_dim:
            raise T.ShapeError("mlp", x.shape, (self.in_dim - n_tail,))
        if self.skip is not None and m < self.skip.shape[0]:
            raise T.ShapeError("mlp", x.shape, (self.skip.shape[0],))
        ws, bs = self.weights, self.biases
        n = len(ws)
        width = ws[0].shape[1]
        tanh = self.activation == "tanh"
        w_first, w_first_t, w_tail, later_t = self._fused_first(m)
        pre = xd @ w_first
        b0 = bs[0] if tail is None else bs[0] + tail @ w_tail
        h = pre[..., :width] + b0
        derivs = []
        for i in range(1, n):
            h = np.tanh(h) if tanh else np.maximum(h, 0.0)
            derivs.append(1.0 - h * h if tanh else (h > 0).astype(np.float64))
            h = h @ ws[i] + bs[i]
        if self.skip is not None:
            h = h + pre[..., width:]

        def vjp(g):
            gs = g
            for i in range(n - 1, 0, -1):
                g = (g @ later_t[i - 1]) * derivs[i - 1]
            if self.skip is not None:
                g = np.concatenate([g, gs], axis=-1)
            return (g @ w_first_t,)

        return T.custom_op("mlp", (x,), h, vjp)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        """Plain numpy forward pass, no tape."""
        h = np.asarray(x, dtype=np.float64)
        x0 = h
        n = len(self.weights)
        for i in range(n):
            h = h @ self.weights[i] + self.biases[i]
            if i < n - 1:
                h = np.tanh(h) if self.activation == "tanh" else np.maximum(h, 0.0)
        if self.skip is not None:
            h = h + x0[..., : self.skip.shape[0]] @ self.skip
        return h


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def step(self, params: list[np.ndarray], grads: list[np.ndarray], lr: float | None = None) -> list[np.ndarray]:
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.step_count += 1
        lr = self.lr if lr is None else lr
        c1 = 1.0 - self.beta1**self.step_count
        c2 = 1.0 - self.beta2**self.step_count
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            out.append(p - lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps))
        return out


def cosine_lr(base: float, step: int, total: int, floor: float = 0.02) -> float:
    frac = min(step / max(total, 1), 1.0)
    return base * (floor + (1 - floor) * 0.5 * (1 + np.cos(np.pi * frac)))


def train_step(model: MLP, opt: Adam, loss_fn, lr: float | None = None) -> float:
    """One optimizer step. ``loss_fn(forward)`` builds a scalar loss from a
    callable mapping input tensors to model outputs."""
    with T.Tape() as tape:
        params = [tape.watch(Tensor(p)) for p in model.parameters()]
        loss = loss_fn(lambda x: model.forward(x, params))
    grads = tape.gradient(loss, params)
    value = loss.item()
    if not np.isfinite(value):
        return value
    model.set_parameters(opt.step(model.parameters(), grads, lr))
    return value
