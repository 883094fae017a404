"""Minimal reverse-mode automatic differentiation over numpy float64 arrays.

Every trainable component in this package (hierarchical VAE, flat VAE,
latent autoencoder, denoiser, semantic classifier) computes gradients
through this tape, so a single set of finite-difference checks covers
all of them. Only the operations those models need are implemented.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import NumericError, ShapeError


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    # sum out prepended axes
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Tensor:
    """Node in the computation graph. Data is always float64."""

    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(self, data, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    # ---- graph plumbing ----

    def backward(self):
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar loss")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        for node in topo:
            node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def _accum(self, g: np.ndarray):
        g = _unbroadcast(g, self.data.shape)
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad = self.grad + g

    # ---- arithmetic ----

    def __add__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        out = Tensor(self.data + other.data, (self, other))

        def back(g):
            self._accum(g)
            other._accum(g)

        out._backward = back
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.data, (self,))
        out._backward = lambda g: self._accum(-g)
        return out

    def __sub__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        return self + (-other)

    def __rsub__(self, other):
        return Tensor(other) + (-self)

    def __mul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        out = Tensor(self.data * other.data, (self, other))

        def back(g):
            self._accum(g * other.data)
            other._accum(g * self.data)

        out._backward = back
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        return self * other ** -1.0

    def __rtruediv__(self, other):
        return Tensor(other) * self ** -1.0

    def __pow__(self, p: float):
        out = Tensor(self.data ** p, (self,))
        out._backward = lambda g: self._accum(g * p * self.data ** (p - 1.0))
        return out

    def __matmul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        out = Tensor(self.data @ other.data, (self, other))

        def back(g):
            a, b = self.data, other.data
            if a.ndim == 1 and b.ndim == 2:
                self._accum(g @ b.T)
                other._accum(np.outer(a, g))
            elif a.ndim == 2 and b.ndim == 2:
                self._accum(g @ b.T)
                other._accum(a.T @ g)
            elif a.ndim == 2 and b.ndim == 1:
                self._accum(np.outer(g, b))
                other._accum(a.T @ g)
            else:
                self._accum(g * b)
                other._accum(g * a)

        out._backward = back
        return out

    # ---- elementwise nonlinearities ----

    def exp(self):
        y = np.exp(self.data)
        out = Tensor(y, (self,))
        out._backward = lambda g: self._accum(g * y)
        return out

    def log(self):
        out = Tensor(np.log(self.data), (self,))
        out._backward = lambda g: self._accum(g / self.data)
        return out

    def sqrt(self):
        return self ** 0.5

    def tanh(self):
        y = np.tanh(self.data)
        out = Tensor(y, (self,))
        out._backward = lambda g: self._accum(g * (1.0 - y * y))
        return out

    def sigmoid(self):
        y = np.where(self.data >= 0,
                     1.0 / (1.0 + np.exp(-np.abs(self.data))),
                     np.exp(-np.abs(self.data)) / (1.0 + np.exp(-np.abs(self.data))))
        out = Tensor(y, (self,))
        out._backward = lambda g: self._accum(g * y * (1.0 - y))
        return out

    def softplus(self):
        y = np.logaddexp(0.0, self.data)
        out = Tensor(y, (self,))
        s = 1.0 / (1.0 + np.exp(-np.clip(self.data, -500, 500)))
        out._backward = lambda g: self._accum(g * s)
        return out

    # ---- reductions / shape ----

    def sum(self, axis=None, keepdims=False):
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims), (self,))

        def back(g):
            if axis is None:
                self._accum(np.broadcast_to(g, self.data.shape).copy())
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                self._accum(np.broadcast_to(gg, self.data.shape).copy())

        out._backward = back
        return out

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        out = Tensor(self.data.reshape(*shape), (self,))
        out._backward = lambda g: self._accum(g.reshape(self.data.shape))
        return out

    def __getitem__(self, idx):
        out = Tensor(self.data[idx], (self,))

        def back(g):
            full = np.zeros_like(self.data)
            np.add.at(full, idx, g)
            self._accum(full)

        out._backward = back
        return out


def concat(tensors, axis=-1) -> Tensor:
    ts = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in ts], axis=axis), tuple(ts))
    sizes = [t.data.shape[axis] for t in ts]

    def back(g):
        offs = np.cumsum([0] + sizes)
        for t, lo, hi in zip(ts, offs[:-1], offs[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis if axis >= 0 else g.ndim + axis] = slice(lo, hi)
            t._accum(g[tuple(sl)])

    out._backward = back
    return out


def logsumexp(x: Tensor, axis=-1, keepdims=False) -> Tensor:
    """Stable logsumexp; the max shift is a detached constant (exact gradient)."""
    m = np.max(x.data, axis=axis, keepdims=True)
    shifted = x - Tensor(m)
    out = shifted.exp().sum(axis=axis, keepdims=True).log() + Tensor(m)
    if not keepdims:
        out = out.reshape(*np.squeeze(out.data, axis=axis).shape)
    return out


# ---- continuous Bernoulli log normalizer ----

def _cb_log_norm_np(lam: np.ndarray) -> np.ndarray:
    """log C(lam) where C normalizes the continuous Bernoulli on [0,1]."""
    u = 1.0 - 2.0 * lam
    au = np.abs(u)
    small = au < 0.1
    # series: log(atanh(u)/u) = log(1 + u^2/3 + u^4/5 + ...)
    u2 = u * u
    series = u2 / 3 + u2**2 / 5 + u2**3 / 7 + u2**4 / 9 + u2**5 / 11
    safe_au = np.where(small, 0.5, au)
    exact = np.log(np.arctanh(safe_au)) - np.log(safe_au)
    return math.log(2.0) + np.where(small, np.log1p(series), exact)


def _cb_log_norm_grad_np(lam: np.ndarray) -> np.ndarray:
    """d/d lam of log C(lam)."""
    u = 1.0 - 2.0 * lam
    au = np.abs(u)
    small = au < 0.1
    u2 = u * u
    num = 2 * u / 3 + 4 * u * u2 / 5 + 6 * u * u2**2 / 7 + 8 * u * u2**3 / 9 + 10 * u * u2**4 / 11
    den = 1.0 + u2 / 3 + u2**2 / 5 + u2**3 / 7 + u2**4 / 9 + u2**5 / 11
    g_small = num / den
    safe_u = np.where(small, 0.5, u)
    g_exact = 1.0 / ((1.0 - safe_u * safe_u) * np.arctanh(safe_u)) - 1.0 / safe_u
    g_u = np.where(small, g_small, g_exact)
    return -2.0 * g_u


def cb_log_norm(lam: Tensor) -> Tensor:
    """Continuous-Bernoulli log normalizer as a single differentiable op."""
    out = Tensor(_cb_log_norm_np(lam.data), (lam,))
    out._backward = lambda g: lam._accum(g * _cb_log_norm_grad_np(lam.data))
    return out


def cb_nll(lam: Tensor, x: np.ndarray) -> Tensor:
    """Continuous-Bernoulli negative log-likelihood of pixels x under mean lam.

    Summed over all elements. x is a constant in [0,1]; lam must lie
    strictly inside (0,1) (a sigmoid output qualifies).
    """
    x = np.asarray(x, dtype=np.float64)
    ll = Tensor(x) * lam.log() + Tensor(1.0 - x) * (1.0 - lam).log() + cb_log_norm(lam)
    return -ll.sum()


# ---- parameter utilities ----

def global_norm(params: dict) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad ** 2).sum())
    return math.sqrt(total)


def sgd_step(params: dict, lr: float, clip_norm: float = 100.0):
    """Plain SGD with global-norm gradient clipping, in place."""
    gn = global_norm(params)
    scale = lr * (clip_norm / gn if gn > clip_norm else 1.0)
    for p in params.values():
        if p.grad is not None:
            p.data -= scale * p.grad
            if not np.all(np.isfinite(p.data)):
                raise NumericError("non-finite parameter after SGD step")


def flatten_params(params: dict) -> np.ndarray:
    return np.concatenate([params[k].data.ravel() for k in sorted(params)])


def set_flat_params(params: dict, flat: np.ndarray):
    off = 0
    for k in sorted(params):
        n = params[k].data.size
        params[k].data = flat[off:off + n].reshape(params[k].data.shape).copy()
        off += n
