"""Small float64 neural-network engine with explicit reverse-mode gradients.

Layers are functional: ``forward`` returns ``(output, cache)`` and
``backward(grad_out, cache)`` accumulates parameter gradients and returns
the gradient with respect to the input.  Parameters live in flat per-group
buffers (:class:`ParamGroup`) so optimizer steps, freezing and checkpoints
operate on whole groups.
"""

from __future__ import annotations

import logging
import math

import numpy as np

from .errors import ShapeMismatch, ZeroTargetNorm

log = logging.getLogger(__name__)

DTYPE = np.float64


def xavier_init(shape, rng: np.random.Generator) -> np.ndarray:
    fan_in, fan_out = shape[0], shape[-1]
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


class ParamGroup:
    """Named tensors backed by one contiguous buffer (plus gradient and Adam moments)."""

    def __init__(self, name: str):
        self.name = name
        self.specs: list[tuple[str, tuple]] = []
        self._pending: list[tuple[object, str, np.ndarray]] = []
        self.data = np.zeros(0, DTYPE)
        self.grad = np.zeros(0, DTYPE)
        self.m = np.zeros(0, DTYPE)
        self.v = np.zeros(0, DTYPE)
        self.t = 0

    def register(self, owner, attr: str, init: np.ndarray):
        self._pending.append((owner, attr, np.asarray(init, DTYPE)))

    def finalize(self):
        total = sum(a.size for _, _, a in self._pending)
        self.data = np.zeros(total, DTYPE)
        self.grad = np.zeros(total, DTYPE)
        self.m = np.zeros(total, DTYPE)
        self.v = np.zeros(total, DTYPE)
        off = 0
        for i, (owner, attr, init) in enumerate(self._pending):
            sl = slice(off, off + init.size)
            self.data[sl] = init.reshape(-1)
            setattr(owner, attr, self.data[sl].reshape(init.shape))
            owner.grads[attr] = self.grad[sl].reshape(init.shape)
            self.specs.append((f"{i:02d}.{type(owner).__name__}.{attr}", init.shape))
            off += init.size
        self._pending.clear()

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self):
        self.grad[...] = 0.0


class Layer:
    frozen = False

    def __init__(self):
        self.grads: dict[str, np.ndarray] = {}


class Dense(Layer):
    def __init__(self, n_in: int, n_out: int, group: ParamGroup, rng: np.random.Generator):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        group.register(self, "W", xavier_init((n_in, n_out), rng))
        group.register(self, "b", np.zeros(n_out))

    def forward(self, x):
        if x.shape[-1] != self.n_in:
            raise ShapeMismatch(f"Dense expects {self.n_in} inputs, got {x.shape[-1]}")
        return x @ self.W + self.b, x

    def backward(self, dy, x, need_input_grad=True):
        if not self.frozen:
            self.grads["W"] += x.T @ dy
            self.grads["b"] += dy.sum(axis=0)
        return dy @ self.W.T if need_input_grad else None


class ReLU(Layer):
    def forward(self, x):
        mask = x > 0.0
        return np.where(mask, x, 0.0), mask

    def backward(self, dy, mask, need_input_grad=True):
        return np.where(mask, dy, 0.0)


class Sigmoid(Layer):
    def forward(self, x):
        y = 0.5 * (1.0 + np.tanh(0.5 * x))
        return y, y

    def backward(self, dy, y, need_input_grad=True):
        return dy * y * (1.0 - y)


class Embedding(Layer):
    def __init__(self, vocab: int, dim: int, group: ParamGroup, rng: np.random.Generator):
        super().__init__()
        self.vocab, self.dim = vocab, dim
        group.register(self, "table", xavier_init((vocab, dim), rng))

    def forward(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= self.vocab):
            raise ShapeMismatch(f"class index outside vocabulary of size {self.vocab}")
        return self.table[idx], idx

    def backward(self, dy, idx, need_input_grad=True):
        if not self.frozen:
            np.add.at(self.grads["table"], idx, dy)
        return None


def pos_enc(x, L: int) -> np.ndarray:
    """``[sin(2x), cos(2x), ..., sin(2^L x), cos(2^L x)]`` along the last axis."""
    x = np.asarray(x, dtype=DTYPE)
    freqs = 2.0 ** np.arange(1, L + 1, dtype=DTYPE)
    arg = x[..., None] * freqs
    out = np.empty(x.shape + (2 * L,), DTYPE)
    out[..., 0::2] = np.sin(arg)
    out[..., 1::2] = np.cos(arg)
    return out


_clamp_logged = False


class PosEnc(Layer):
    """Positional encoding of a scalar angle; inputs are clamped onto [0, pi/2]."""

    def __init__(self, L: int):
        super().__init__()
        self.L = L

    def forward(self, x):
        global _clamp_logged
        x = np.asarray(x, dtype=DTYPE).reshape(-1)
        xc = np.clip(x, 0.0, 0.5 * math.pi)
        if not _clamp_logged and np.any(xc != x):
            log.warning("PosEnc input outside [0, pi/2] clamped (further occurrences not logged)")
            _clamp_logged = True
        return pos_enc(xc, self.L), (xc, xc == x)

    def backward(self, dy, cache, need_input_grad=True):
        xc, inside = cache
        freqs = 2.0 ** np.arange(1, self.L + 1, dtype=DTYPE)
        arg = xc[:, None] * freqs
        dx = (dy[:, 0::2] * np.cos(arg) * freqs).sum(axis=1) - (dy[:, 1::2] * np.sin(arg) * freqs).sum(axis=1)
        return np.where(inside, dx, 0.0)


class Sequential(Layer):
    def __init__(self, layers):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x):
        caches = []
        for layer in self.layers:
            x, c = layer.forward(x)
            caches.append(c)
        return x, caches

    def backward(self, dy, caches, need_input_grad=True):
        for i in range(len(self.layers) - 1, -1, -1):
            need = need_input_grad or i > 0
            dy = self.layers[i].backward(dy, caches[i], need)
        return dy

    def set_frozen(self, frozen: bool):
        for layer in self.layers:
            if isinstance(layer, Sequential):
                layer.set_frozen(frozen)
            layer.frozen = frozen


class ResidualBlock(Sequential):
    """FFN block ``Dense(in->hidden) -> ReLU -> Dense(hidden->out)`` with an identity skip."""

    def __init__(self, dims, group: ParamGroup, rng, residual: bool = True):
        d_in, hidden, d_out = dims
        if residual and d_in != d_out:
            raise ShapeMismatch(f"residual block needs equal in/out widths, got {dims}")
        super().__init__([Dense(d_in, hidden, group, rng), ReLU(), Dense(hidden, d_out, group, rng)])
        self.residual = residual

    def forward(self, x):
        y, caches = super().forward(x)
        return (y + x if self.residual else y), caches

    def backward(self, dy, caches, need_input_grad=True):
        dx = super().backward(dy, caches, True)
        return dx + dy if self.residual else dx


# ----------------------------------------------------------------------------- losses


def nmse(pred, target) -> tuple[float, np.ndarray]:
    """``||pred - target||^2 / ||target||^2`` and its gradient w.r.t. ``pred``."""
    pred = np.asarray(pred, DTYPE)
    target = np.asarray(target, DTYPE)
    denom = float(np.sum(target * target))
    if denom == 0.0:
        raise ZeroTargetNorm("NMSE undefined for an all-zero target")
    diff = pred - target
    return float(np.sum(diff * diff)) / denom, 2.0 * diff / denom


def angle_mse(beta_hat, beta) -> float:
    """Squared distance between angles represented as (sin, cos) pairs, averaged."""
    beta_hat = np.asarray(beta_hat, DTYPE)
    beta = np.asarray(beta, DTYPE)
    return float(np.mean((np.sin(beta_hat) - np.sin(beta)) ** 2 + (np.cos(beta_hat) - np.cos(beta)) ** 2))


def sincos_mse(sc_hat, sc) -> tuple[float, np.ndarray]:
    """Batch-mean of ``(s_hat - s)^2 + (c_hat - c)^2`` and its gradient."""
    diff = sc_hat - sc
    n = len(sc)
    return float(np.sum(diff * diff)) / n, 2.0 * diff / n


# ----------------------------------------------------------------------------- optimizer


class Adam:
    """Bias-corrected Adam over whole parameter groups."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def step(self, group: ParamGroup, lr: float):
        group.t += 1
        g = group.grad
        group.m *= self.beta1
        group.m += (1.0 - self.beta1) * g
        group.v *= self.beta2
        group.v += (1.0 - self.beta2) * g * g
        mhat = group.m / (1.0 - self.beta1**group.t)
        vhat = group.v / (1.0 - self.beta2**group.t)
        group.data -= lr * mhat / (np.sqrt(vhat) + self.eps)

    def reset(self, group: ParamGroup):
        group.m[...] = 0.0
        group.v[...] = 0.0
        group.t = 0


def adam_step(params: np.ndarray, grads: np.ndarray, m: np.ndarray, v: np.ndarray, t: int, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> np.ndarray:
    """Functional Adam update on raw arrays (``t >= 1``); moments are updated in place."""
    m *= beta1
    m += (1.0 - beta1) * grads
    v *= beta2
    v += (1.0 - beta2) * grads * grads
    mhat = m / (1.0 - beta1**t)
    vhat = v / (1.0 - beta2**t)
    return params - lr * mhat / (np.sqrt(vhat) + eps)


# ----------------------------------------------------------------------------- gradient checking


def check_gradients(loss_fn, groups, h: float = 1e-5, coords_per_group: int | None = None,
                    rng: np.random.Generator | None = None, kink_fn=None, abs_floor: float = 1e-6):
    """Compare analytic gradients (already in ``group.grad``) with central differences.

    ``loss_fn()`` evaluates the loss at the current parameters.  When
    ``kink_fn`` is given it must return a hashable activation signature
    (e.g. ReLU masks); coordinates whose perturbation changes the signature
    straddle a non-differentiable point and are skipped.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, abs_floor)``.
    Returns ``(max_relative_error, n_checked, n_skipped)``.
    """
    worst, checked, skipped = 0.0, 0, 0
    base_sig = kink_fn() if kink_fn else None
    for g in groups:
        idx = np.arange(g.size)
        if coords_per_group is not None and g.size > coords_per_group:
            idx = (rng or np.random.default_rng(0)).choice(g.size, coords_per_group, replace=False)
        analytic = g.grad.copy()
        for i in idx:
            old = g.data[i]
            g.data[i] = old + h
            fp = loss_fn()
            sp = kink_fn() if kink_fn else None
            g.data[i] = old - h
            fm = loss_fn()
            sm = kink_fn() if kink_fn else None
            g.data[i] = old
            if kink_fn and (sp != base_sig or sm != base_sig):
                skipped += 1
                continue
            num = (fp - fm) / (2.0 * h)
            a = analytic[i]
            rel = abs(a - num) / max(abs(a), abs(num), abs_floor)
            worst = max(worst, rel)
            checked += 1
    return worst, checked, skipped
