"""Dense-tensor math with hand-written backward passes.

Forward/backward pairs for every layer the bridged model needs, an Adam
step over a named parameter store, and a central-difference gradient
checker. Plain numpy throughout; fp64 by default so gradient checks are
meaningful, fp32 available behind ``set_default_dtype`` for faster
training builds.

Backward functions recompute cheap intermediates (softmax rows, norm
statistics) from their inputs instead of threading caches around; at desk
scale the recompute cost is negligible and forward passes stay pure.
"""

from __future__ import annotations

import fnmatch
import math
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .errors import ConfigError, DimensionError, NumericError, StateError

_DTYPE = np.float64


def set_default_dtype(dtype) -> None:
    """Switch the build precision ("float64" for tests, "float32" allowed for training)."""
    global _DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ConfigError(f"unsupported dtype {dtype!r}; use float64 or float32")
    _DTYPE = dt.type


def default_dtype():
    return _DTYPE


def as_array(x, name: str = "operand") -> np.ndarray:
    arr = np.asarray(x)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(_DTYPE)
    return arr


class Tensor:
    """Row-major dense array with an optional same-shape grad accumulator."""

    __slots__ = ("data", "grad")

    def __init__(self, data, dtype=None):
        self.data = np.array(data, dtype=dtype or _DTYPE, order="C")
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def numel(self) -> int:
        return self.data.size

    def ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise DimensionError(
                f"grad shape {g.shape} does not match parameter shape {self.data.shape}"
            )
        self.ensure_grad()
        self.grad += g

    def copy(self) -> "Tensor":
        t = Tensor(self.data)
        if self.grad is not None:
            t.grad = self.grad.copy()
        return t

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, grad={'set' if self.grad is not None else 'none'})"


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


class ParameterStore:
    """Named parameter tensors with per-name trainable flags and Adam state.

    Iteration is always in lexicographic name order so every consumer sees
    the same deterministic sequence. Optimizer state exists only for
    trainable parameters; freezing a parameter drops its state.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._trainable: dict[str, bool] = {}
        self.opt_state: dict[str, AdamState] = {}

    def add(self, name: str, data, trainable: bool = True) -> Tensor:
        if name in self._params:
            raise StateError(f"duplicate parameter name {name!r}")
        t = Tensor(data)
        self._params[name] = t
        self._trainable[name] = bool(trainable)
        return t

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._params[name]
        except KeyError:
            raise KeyError(f"no parameter named {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self):
        for name in self.names():
            yield name, self._params[name]

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def trainable_names(self) -> list[str]:
        return [n for n in self.names() if self._trainable[n]]

    def set_trainable(self, pattern: str, flag: bool, require_match: bool = True) -> int:
        """Set the trainable flag on every name matching an fnmatch pattern."""
        matched = [n for n in self.names() if fnmatch.fnmatchcase(n, pattern)]
        if not matched and require_match:
            raise ConfigError(f"freeze pattern {pattern!r} matches no parameter")
        for n in matched:
            self._trainable[n] = flag
            if not flag:
                self.opt_state.pop(n, None)
        return len(matched)

    def accumulate(self, name: str, g: np.ndarray) -> None:
        """Add into a parameter's grad buffer; silently skipped when frozen."""
        if self._trainable[name]:
            self._params[name].accumulate(g)

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def clone_values(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.items()}


# ---------------------------------------------------------------------------
# layers: forward / backward pairs
# ---------------------------------------------------------------------------


def linear(x, w, b=None) -> np.ndarray:
    """x (*, in), w (in, out), b (out,) -> x @ w + b."""
    x, w = as_array(x), as_array(w)
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(
            f"linear: x last dim {x.shape[-1]} does not match w first dim {w.shape[0]}"
        )
    y = x @ w
    if b is not None:
        b = as_array(b)
        if b.shape != (w.shape[1],):
            raise DimensionError(f"linear: b shape {b.shape} does not match out dim {w.shape[1]}")
        y = y + b
    return y


def linear_backward(dy, x, w):
    """Grads for y = x @ w + b. Returns (dx, dw, db)."""
    dy, x, w = as_array(dy), as_array(x), as_array(w)
    dx = dy @ w.T
    xf = x.reshape(-1, x.shape[-1])
    dyf = dy.reshape(-1, dy.shape[-1])
    dw = xf.T @ dyf
    db = dyf.sum(axis=0)
    return dx, dw, db


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> np.ndarray:
    """Standardize the last axis to mean 0 / var 1, then scale and shift."""
    x, gamma, beta = as_array(x), as_array(gamma), as_array(beta)
    d = x.shape[-1]
    if d == 0:
        raise DimensionError("layer_norm: zero-length last dimension")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm: gamma/beta shapes {gamma.shape}/{beta.shape} do not match last dim {d}"
        )
    if eps <= 0:
        raise ConfigError("layer_norm: eps must be > 0")
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    xhat = (x - mu) / np.sqrt(var + eps)
    return xhat * gamma + beta


def layer_norm_backward(dy, x, gamma, eps: float = 1e-5):
    """Grads for layer_norm. Returns (dx, dgamma, dbeta)."""
    dy, x, gamma = as_array(dy), as_array(x), as_array(gamma)
    d = x.shape[-1]
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    dgamma = (dy * xhat).reshape(-1, d).sum(axis=0)
    dbeta = dy.reshape(-1, d).sum(axis=0)
    dxhat = dy * gamma
    # dx = inv * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgamma, dbeta


def softmax(x, axis: int = -1) -> np.ndarray:
    """Max-subtracted stable softmax along one axis; rows sum to 1."""
    x = as_array(x)
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(dy, y, axis: int = -1) -> np.ndarray:
    """dx given dy and the forward output y = softmax(x)."""
    dy, y = as_array(dy), as_array(y)
    return y * (dy - (dy * y).sum(axis=axis, keepdims=True))


def cross_entropy(logits, target_ids, mask=None) -> float:
    """Mean negative log-likelihood of target_ids under softmax(logits).

    logits (N, V), target_ids (N,) ints, mask (N,) bool with True = scored
    position. Stabilized via log-sum-exp.
    """
    logits = as_array(logits)
    targets = np.asarray(target_ids, dtype=np.int64)
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy: logits must be 2-D, got shape {logits.shape}")
    n, v = logits.shape
    if targets.shape != (n,):
        raise DimensionError(f"cross_entropy: target shape {targets.shape} does not match ({n},)")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        bad = targets[(targets < 0) | (targets >= v)][0]
        raise IndexError(f"cross_entropy: target id {bad} out of range [0, {v})")
    mask = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    n_scored = int(mask.sum())
    if n_scored == 0:
        raise DimensionError("cross_entropy: mask excludes every position")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1))
    nll = lse - shifted[np.arange(n), targets]
    return float(nll[mask].sum() / n_scored)


def cross_entropy_backward(logits, target_ids, mask=None) -> np.ndarray:
    """dlogits for the mean NLL above (upstream grad 1)."""
    logits = as_array(logits)
    targets = np.asarray(target_ids, dtype=np.int64)
    n, _ = logits.shape
    mask = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    n_scored = int(mask.sum())
    d = softmax(logits, axis=-1)
    d[np.arange(n), targets] -= 1.0
    d *= mask[:, None] / n_scored
    return d


def _attention_scores(q, k, mask, causal):
    q, k = as_array(q), as_array(k)
    if q.ndim != 2 or k.ndim != 2:
        raise DimensionError("attention: q and k must be 2-D")
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(
            f"attention: head dims differ, q has {q.shape[-1]}, k has {k.shape[-1]}"
        )
    nq, nk = q.shape[0], k.shape[0]
    scores = (q @ k.T) / math.sqrt(q.shape[-1])
    blocked = np.zeros((nq, nk), dtype=bool)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (nq, nk):
            raise DimensionError(f"attention: mask shape {mask.shape} != ({nq}, {nk})")
        blocked |= mask
    if causal:
        blocked |= np.triu(np.ones((nq, nk), dtype=bool), k=1 + (nk - nq))
    if blocked.all(axis=1).any():
        raise NumericError("attention: a query row is fully masked (undefined distribution)")
    scores = np.where(blocked, -np.inf, scores)
    return scores


def attention(q, k, v, mask=None, causal: bool = False) -> np.ndarray:
    """softmax(q kT / sqrt(d) + mask) @ v.

    q (nq, d), k (nk, d), v (nk, dv); mask (nq, nk) bool with True = blocked.
    causal=True additionally blocks positions ahead of the query (square or
    right-aligned rectangular layouts).
    """
    v = as_array(v)
    scores = _attention_scores(q, k, mask, causal)
    if v.shape[0] != scores.shape[1]:
        raise DimensionError(f"attention: v rows {v.shape[0]} != k rows {scores.shape[1]}")
    return softmax(scores, axis=-1) @ v


def attention_backward(dout, q, k, v, mask=None, causal: bool = False):
    """Grads for attention(). Returns (dq, dk, dv); recomputes the probs."""
    dout, q, k, v = as_array(dout), as_array(q), as_array(k), as_array(v)
    scores = _attention_scores(q, k, mask, causal)
    p = softmax(scores, axis=-1)
    dv = p.T @ dout
    dp = dout @ v.T
    ds = softmax_backward(dp, p, axis=-1) / math.sqrt(q.shape[-1])
    dq = ds @ k
    dk = ds.T @ q
    return dq, dk, dv


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def adam_step(store: ParameterStore, lr: float) -> None:
    """One bias-corrected Adam update over every trainable parameter.

    Frozen parameters are never touched. Gradients of updated parameters
    are cleared afterward; a trainable parameter without a gradient is a
    state error.
    """
    for name in store.trainable_names():
        p = store[name]
        if p.grad is None:
            raise StateError(f"adam_step: trainable parameter {name!r} has no gradient")
        state = store.opt_state.get(name)
        if state is None:
            state = AdamState(m=np.zeros_like(p.data), v=np.zeros_like(p.data))
            store.opt_state[name] = state
        g = p.grad
        state.t += 1
        state.m = ADAM_BETA1 * state.m + (1.0 - ADAM_BETA1) * g
        state.v = ADAM_BETA2 * state.v + (1.0 - ADAM_BETA2) * (g * g)
        mhat = state.m / (1.0 - ADAM_BETA1 ** state.t)
        vhat = state.v / (1.0 - ADAM_BETA2 ** state.t)
        p.data -= lr * mhat / (np.sqrt(vhat) + ADAM_EPS)
        p.zero_grad()


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def grad_check(
    f: Callable[[], float],
    store: ParameterStore,
    h: float = 1e-5,
    param_names: Iterable[str] | None = None,
) -> float:
    """Max relative error between analytic grads and central differences.

    ``f`` runs forward and backward over the store's trainable parameters
    and returns the scalar loss, accumulating grads into the store. The
    relative error uses denominator max(|analytic|, |numeric|, 1e-8).
    """
    names = list(param_names) if param_names is not None else store.trainable_names()
    store.zero_grads()
    base = float(f())
    if not math.isfinite(base):
        raise NumericError(f"grad_check: non-finite loss {base}")
    analytic = {}
    for name in names:
        g = store[name].grad
        analytic[name] = np.zeros_like(store[name].data) if g is None else g.copy()
    max_rel = 0.0
    for name in names:
        p = store[name].data
        flat = p.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            store.zero_grads()
            lp = float(f())
            flat[i] = orig - h
            store.zero_grads()
            lm = float(f())
            flat[i] = orig
            if not (math.isfinite(lp) and math.isfinite(lm)):
                raise NumericError(f"grad_check: non-finite loss while perturbing {name!r}")
            numeric = (lp - lm) / (2.0 * h)
            denom = max(abs(a_flat[i]), abs(numeric), 1e-8)
            max_rel = max(max_rel, abs(a_flat[i] - numeric) / denom)
    store.zero_grads()
    return max_rel
