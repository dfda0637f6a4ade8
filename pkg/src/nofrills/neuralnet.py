"""Small MLP core with batch normalization and hand-written backprop.

Hidden layers are ``affine -> batchnorm -> relu``; the last layer is a plain
affine producing logits. All parameters of one network live in a single flat
buffer with named views, which keeps optimizer steps and checkpointing to a
few whole-array operations.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

BN_MOMENTUM = 0.1
BN_EPS = 1e-5
PROB_CLAMP = 1e-7


class NonFiniteError(FloatingPointError):
    pass


def sigmoid(x):
    x = np.asarray(x)
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class _FlatParams:
    """Named views into one contiguous vector."""

    def __init__(self, shapes: Sequence[tuple[str, tuple[int, ...]]], dtype):
        total = sum(int(np.prod(s)) for _, s in shapes)
        self.flat = np.zeros(total, dtype=dtype)
        self.slices: dict[str, slice] = {}
        self.views: dict[str, np.ndarray] = {}
        off = 0
        for name, shape in shapes:
            n = int(np.prod(shape))
            self.slices[name] = slice(off, off + n)
            self.views[name] = self.flat[off: off + n].reshape(shape)
            off += n

    def __getitem__(self, name: str) -> np.ndarray:
        return self.views[name]

    def names(self) -> list[str]:
        return list(self.views)


@dataclass
class GradientTape:
    """Gradient buffers mirroring an :class:`Mlp`'s parameter shapes.

    ``flat`` aliases the network's gradient buffer; it is overwritten by the
    next ``backward`` call.
    """

    flat: np.ndarray
    views: dict[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.views[name]


class Mlp:
    """``dims = [d_in, hidden..., d_out]``."""

    def __init__(self, dims: Sequence[int], rng: np.random.Generator | None = None,
                 dtype=np.float32, momentum: float = BN_MOMENTUM, bn_eps: float = BN_EPS):
        if len(dims) < 2:
            raise ValueError("an MLP needs at least input and output widths")
        self.dims = [int(d) for d in dims]
        self.dtype = np.dtype(dtype)
        self.momentum = momentum
        self.bn_eps = bn_eps
        self.n_layers = len(dims) - 1
        shapes = []
        bufs = []
        for k in range(self.n_layers):
            din, dout = self.dims[k], self.dims[k + 1]
            shapes += [(f"layer{k}.weight", (din, dout)), (f"layer{k}.bias", (dout,))]
            if self.is_hidden(k):
                shapes += [(f"layer{k}.bn_scale", (dout,)), (f"layer{k}.bn_shift", (dout,))]
                bufs += [(f"layer{k}.running_mean", (dout,)), (f"layer{k}.running_var", (dout,))]
        self.params = _FlatParams(shapes, self.dtype)
        self.grads = _FlatParams(shapes, self.dtype)
        self.buffers = _FlatParams(bufs, self.dtype)
        rng = rng if rng is not None else np.random.default_rng(0)
        for k in range(self.n_layers):
            self.params[f"layer{k}.weight"][...] = glorot_uniform(rng, self.dims[k], self.dims[k + 1])
            if self.is_hidden(k):
                self.params[f"layer{k}.bn_scale"][...] = 1.0
                self.buffers[f"layer{k}.running_var"][...] = 1.0
        self.training = True
        self._cache: list | None = None

    def is_hidden(self, k: int) -> bool:
        return k < self.n_layers - 1

    @property
    def d_in(self) -> int:
        return self.dims[0]

    @property
    def d_out(self) -> int:
        return self.dims[-1]

    @property
    def num_params(self) -> int:
        return self.params.flat.size

    def train(self) -> "Mlp":
        self.training = True
        return self

    def eval(self) -> "Mlp":
        self.training = False
        self._cache = None
        return self

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 2 or x.shape[1] != self.d_in:
            raise ValueError(f"input shape {x.shape} does not match MLP input width {self.d_in}")
        n = x.shape[0]
        if self.training and n < 2:
            raise ValueError("training-mode forward needs at least 2 samples for batch statistics")
        cache = []
        h = x
        for k in range(self.n_layers):
            W = self.params[f"layer{k}.weight"]
            z = h @ W
            z += self.params[f"layer{k}.bias"]
            if not self.is_hidden(k):
                cache.append((h, None, None, None))
                h = z
                break
            gamma = self.params[f"layer{k}.bn_scale"]
            beta = self.params[f"layer{k}.bn_shift"]
            if self.training:
                mu = z.mean(axis=0, dtype=np.float64)
                centered = z - mu.astype(self.dtype)
                var = np.mean(np.square(centered, dtype=np.float64), axis=0)
                inv_std = (1.0 / np.sqrt(var + self.bn_eps)).astype(self.dtype)
                xhat = centered * inv_std
                m = self.momentum
                rm = self.buffers[f"layer{k}.running_mean"]
                rv = self.buffers[f"layer{k}.running_var"]
                rm *= (1 - m)
                rm += (m * mu).astype(self.dtype)
                rv *= (1 - m)
                rv += (m * var * n / (n - 1)).astype(self.dtype)
            else:
                rm = self.buffers[f"layer{k}.running_mean"]
                rv = self.buffers[f"layer{k}.running_var"]
                inv_std = (1.0 / np.sqrt(rv.astype(np.float64) + self.bn_eps)).astype(self.dtype)
                xhat = (z - rm) * inv_std
            y = xhat * gamma
            y += beta
            active = y > 0
            cache.append((h, xhat, inv_std, active))
            h = np.where(active, y, 0).astype(self.dtype, copy=False)
        self._cache = cache if self.training else None
        return h

    __call__ = forward

    def backward(self, dout: np.ndarray, need_input_grad: bool = False):
        """Backpropagate ``dout = dL/dlogits`` through the last training forward.

        Returns the :class:`GradientTape`, plus ``dL/dx`` when ``need_input_grad``.
        """
        if self._cache is None:
            raise RuntimeError("backward needs cached activations from a training-mode forward")
        g = np.asarray(dout, dtype=self.dtype)
        n = g.shape[0]
        dx = None
        for k in reversed(range(self.n_layers)):
            h_in, xhat, inv_std, active = self._cache[k]
            if self.is_hidden(k):
                dy = np.where(active, g, 0).astype(self.dtype, copy=False)
                self.grads[f"layer{k}.bn_scale"][...] = np.sum(dy * xhat, axis=0, dtype=np.float64)
                self.grads[f"layer{k}.bn_shift"][...] = np.sum(dy, axis=0, dtype=np.float64)
                dxhat = dy * self.params[f"layer{k}.bn_scale"]
                s1 = np.sum(dxhat, axis=0, dtype=np.float64)
                s2 = np.sum(dxhat * xhat, axis=0, dtype=np.float64)
                dz = (dxhat - (s1 / n).astype(self.dtype) - xhat * (s2 / n).astype(self.dtype)) * inv_std
            else:
                dz = g
            self.grads[f"layer{k}.weight"][...] = h_in.T @ dz
            self.grads[f"layer{k}.bias"][...] = np.sum(dz, axis=0, dtype=np.float64)
            if k > 0 or need_input_grad:
                g = dz @ self.params[f"layer{k}.weight"].T
                if k == 0:
                    dx = g
        tape = GradientTape(self.grads.flat, self.grads.views)
        return (tape, dx) if need_input_grad else tape

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {prefix + n: v for n, v in self.params.views.items()}
        out.update({prefix + n: v for n, v in self.buffers.views.items()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        for group in (self.params, self.buffers):
            for n, v in group.views.items():
                key = prefix + n
                if key not in state:
                    raise KeyError(f"missing tensor {key}")
                src = np.asarray(state[key])
                if src.shape != v.shape:
                    raise ValueError(f"tensor {key}: shape {src.shape} != expected {v.shape}")
                v[...] = src

    def copy_params(self) -> tuple[np.ndarray, np.ndarray]:
        return self.params.flat.copy(), self.buffers.flat.copy()

    def restore_params(self, snap: tuple[np.ndarray, np.ndarray]) -> None:
        self.params.flat[...] = snap[0]
        self.buffers.flat[...] = snap[1]


# ---------------------------------------------------------------------------

def bce_terms(probs: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise binary cross-entropy and its derivative w.r.t. ``probs``.

    Probabilities are clamped to ``[1e-7, 1 - 1e-7]``; the derivative is zero
    where the clamp is active.
    """
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    pc = np.clip(p, PROB_CLAMP, 1 - PROB_CLAMP)
    loss = -(y * np.log(pc) + (1 - y) * np.log1p(-pc))
    grad = -(y / pc) + (1 - y) / (1 - pc)
    grad = np.where((p > PROB_CLAMP) & (p < 1 - PROB_CLAMP), grad, 0.0)
    return loss, grad


def bce_loss(probs: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy and its gradient w.r.t. ``probs``."""
    p = np.asarray(probs, dtype=np.float64)
    if p.size == 0:
        return 0.0, np.zeros_like(p)
    loss, grad = bce_terms(p, labels)
    return float(loss.sum() / p.size), grad / p.size


class Adam:
    """Adam over one flat parameter vector, updated in place."""

    def __init__(self, params: np.ndarray, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, slices: dict[str, slice] | None = None):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros_like(params)
        self.v = np.zeros_like(params)
        self._tmp = np.empty_like(params)
        self.t = 0
        self.slices = slices or {}

    def _check(self, grad):
        if np.isfinite(grad).all():
            return
        for name, sl in self.slices.items():
            if not np.isfinite(grad[sl]).all():
                raise NonFiniteError(f"non-finite gradient for parameter {name}")
        raise NonFiniteError("non-finite gradient")

    def step(self, grad: np.ndarray) -> None:
        grad = np.asarray(grad, dtype=self.params.dtype)
        self._check(grad)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        m, v, tmp = self.m, self.v, self._tmp
        m *= b1
        m += (1 - b1) * grad
        np.multiply(grad, grad, out=tmp)
        tmp *= (1 - b2)
        v *= b2
        v += tmp
        np.sqrt(v, out=tmp)
        tmp *= 1.0 / math.sqrt(1 - b2 ** self.t)
        tmp += self.eps
        np.divide(m, tmp, out=tmp)
        tmp *= self.lr / (1 - b1 ** self.t)
        self.params -= tmp

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {prefix + "m": self.m, prefix + "v": self.v,
                prefix + "t": np.array([self.t], dtype=np.float32)}


def mlp_optimizer(mlp: Mlp, lr: float = 1e-3, **kw) -> Adam:
    return Adam(mlp.params.flat, lr=lr, slices=mlp.params.slices, **kw)
