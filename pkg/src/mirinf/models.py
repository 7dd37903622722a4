"""Small differentiable models: multinomial logistic regression and an MLP.

Parameters live in one flat float64 vector. For the logistic model the layout
is the (d+1) x C matrix ``[W; b]`` in row-major order, so a bias-augmented
input row ``[x, 1]`` multiplies it directly. The MLP stores, layer by layer,
``W`` (fan_in x fan_out, row-major) followed by ``b``.

The objective is mean softmax cross-entropy plus ``(l2 / 2) * ||theta||^2``.
Per-example losses and gradients never include the regulariser.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from scipy.special import log_softmax

from .data import Dataset
from .errors import ConfigError, EmptyBatchError, UnsupportedSpecError


@dataclass(frozen=True)
class MultinomialLogistic:
    d: int
    n_classes: int
    l2: float = 0.0

    def __post_init__(self):
        if self.d < 1 or self.n_classes < 2:
            raise ConfigError("logistic model needs d >= 1 and n_classes >= 2")
        if self.l2 < 0:
            raise ConfigError("l2 must be >= 0")


@dataclass(frozen=True)
class Mlp:
    """``layer_widths`` starts with the input dimension; the output layer of
    width ``n_classes`` is appended implicitly."""

    layer_widths: tuple
    n_classes: int
    activation: str = "relu"
    l2: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        if len(self.layer_widths) < 1 or min(self.layer_widths) < 1:
            raise ConfigError("layer_widths must be a non-empty list of positive ints")
        if self.activation not in ("relu", "tanh"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        if self.l2 < 0:
            raise ConfigError("l2 must be >= 0")

    @property
    def widths(self):
        return self.layer_widths + (self.n_classes,)


ModelSpec = Union[MultinomialLogistic, Mlp]


def spec_to_dict(spec: ModelSpec) -> dict:
    if isinstance(spec, MultinomialLogistic):
        return {"kind": "logistic", "d": spec.d, "n_classes": spec.n_classes, "l2": spec.l2}
    return {
        "kind": "mlp",
        "layer_widths": list(spec.layer_widths),
        "n_classes": spec.n_classes,
        "activation": spec.activation,
        "l2": spec.l2,
    }


def spec_from_dict(cfg: dict) -> ModelSpec:
    cfg = dict(cfg)
    kind = cfg.pop("kind", None)
    try:
        if kind == "logistic":
            return MultinomialLogistic(**cfg)
        if kind == "mlp":
            return Mlp(**cfg)
    except TypeError as exc:
        raise ConfigError(f"bad model config: {exc}") from None
    raise ConfigError(f"unknown model kind {kind!r}")


def param_count(spec: ModelSpec) -> int:
    if isinstance(spec, MultinomialLogistic):
        return spec.d * spec.n_classes + spec.n_classes
    w = spec.widths
    return sum(w[i] * w[i + 1] + w[i + 1] for i in range(len(w) - 1))


def init_params(spec: ModelSpec, seed: int = 0) -> np.ndarray:
    if isinstance(spec, MultinomialLogistic):
        return np.zeros(param_count(spec))
    rng = np.random.default_rng(seed)
    w = spec.widths
    chunks = []
    for fan_in, fan_out in zip(w[:-1], w[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        chunks.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
        chunks.append(rng.uniform(-bound, bound, size=fan_out))
    return np.concatenate(chunks)


def _layers(spec: Mlp, params):
    out, pos = [], 0
    w = spec.widths
    for fan_in, fan_out in zip(w[:-1], w[1:]):
        W = params[pos : pos + fan_in * fan_out].reshape(fan_in, fan_out)
        pos += fan_in * fan_out
        b = params[pos : pos + fan_out]
        pos += fan_out
        out.append((W, b))
    return out


def _check_params(spec, params):
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (param_count(spec),):
        raise ConfigError(f"expected {param_count(spec)} parameters, got shape {params.shape}")
    return params


def _rows(data: Dataset, indices):
    if indices is None:
        X, y = data.features, data.labels
    else:
        idx = np.asarray(indices, dtype=np.int64).reshape(-1)
        X, y = data.features[idx], data.labels[idx]
    if X.shape[0] == 0:
        raise EmptyBatchError()
    return X, y


def _augment(X):
    return np.hstack([X, np.ones((X.shape[0], 1))])


def _act(kind, z):
    return np.maximum(z, 0.0) if kind == "relu" else np.tanh(z)


def _act_deriv(kind, z, h):
    return (z > 0).astype(np.float64) if kind == "relu" else 1.0 - h * h


def _forward(spec, params, X):
    """Logits plus the cache needed for backprop (MLP only)."""
    if isinstance(spec, MultinomialLogistic):
        return _augment(X) @ params.reshape(spec.d + 1, spec.n_classes), None
    layers = _layers(spec, params)
    hs, zs = [X], []
    h = X
    for W, b in layers[:-1]:
        z = h @ W + b
        h = _act(spec.activation, z)
        zs.append(z)
        hs.append(h)
    W, b = layers[-1]
    return h @ W + b, (layers, hs, zs)


def logits(spec: ModelSpec, params, X) -> np.ndarray:
    return _forward(spec, _check_params(spec, params), np.asarray(X, dtype=np.float64))[0]


def _per_example(logit, y):
    logp = log_softmax(logit, axis=1)
    return -logp[np.arange(len(y)), y], logp


@dataclass(frozen=True)
class LossValue:
    mean: float
    per_example: Optional[np.ndarray] = None


def loss(spec: ModelSpec, params, data: Dataset, indices=None, want_per_example=False):
    """Mean cross-entropy over the selected rows plus the L2 term."""
    params = _check_params(spec, params)
    X, y = _rows(data, indices)
    per, _ = _per_example(_forward(spec, params, X)[0], y)
    mean = float(per.mean()) + 0.5 * spec.l2 * float(params @ params)
    return LossValue(mean, per if want_per_example else None)


def data_loss(spec: ModelSpec, params, data: Dataset, indices=None) -> float:
    """Mean per-example cross-entropy, without the regulariser."""
    params = _check_params(spec, params)
    X, y = _rows(data, indices)
    return float(_per_example(_forward(spec, params, X)[0], y)[0].mean())


def per_example_losses(spec: ModelSpec, params, data: Dataset, indices=None) -> np.ndarray:
    params = _check_params(spec, params)
    X, y = _rows(data, indices)
    return _per_example(_forward(spec, params, X)[0], y)[0]


def source_losses(spec: ModelSpec, params, data: Dataset, sources) -> np.ndarray:
    """Mean unregularised loss of each index set, from one batched forward pass."""
    params = _check_params(spec, params)
    sources = [np.asarray(s, dtype=np.int64).reshape(-1) for s in sources]
    if any(s.size == 0 for s in sources):
        raise EmptyBatchError()
    if not sources:
        return np.zeros(0)
    per = per_example_losses(spec, params, data, np.concatenate(sources))
    cuts = np.cumsum([s.size for s in sources])[:-1]
    return np.array([chunk.mean() for chunk in np.split(per, cuts)])


def _residual(logit, y):
    # softmax minus one-hot
    r = np.exp(log_softmax(logit, axis=1))
    r[np.arange(len(y)), y] -= 1.0
    return r


def _mlp_deltas(spec, cache, r):
    """Backpropagated errors for each layer, per example (unnormalised)."""
    layers, hs, zs = cache
    deltas = [None] * len(layers)
    delta = r
    for l in range(len(layers) - 1, -1, -1):
        deltas[l] = delta
        if l > 0:
            delta = (delta @ layers[l][0].T) * _act_deriv(spec.activation, zs[l - 1], hs[l])
    return deltas


def grad(spec: ModelSpec, params, data: Dataset, indices=None, regularized=True) -> np.ndarray:
    """Gradient of :func:`loss` (or of :func:`data_loss` when
    ``regularized=False``)."""
    params = _check_params(spec, params)
    X, y = _rows(data, indices)
    m = X.shape[0]
    logit, cache = _forward(spec, params, X)
    r = _residual(logit, y) / m
    if isinstance(spec, MultinomialLogistic):
        g = (_augment(X).T @ r).ravel()
    else:
        deltas = _mlp_deltas(spec, cache, r)
        hs = cache[1]
        parts = []
        for l, delta in enumerate(deltas):
            parts.append((hs[l].T @ delta).ravel())
            parts.append(delta.sum(axis=0))
        g = np.concatenate(parts)
    if regularized and spec.l2:
        g = g + spec.l2 * params
    return g


def per_example_grads(spec: ModelSpec, params, data: Dataset, indices=None) -> np.ndarray:
    """Unregularised per-row gradients, shape (rows, param_count)."""
    params = _check_params(spec, params)
    X, y = _rows(data, indices)
    m = X.shape[0]
    logit, cache = _forward(spec, params, X)
    r = _residual(logit, y)
    if isinstance(spec, MultinomialLogistic):
        return np.einsum("ij,ic->ijc", _augment(X), r).reshape(m, -1)
    deltas = _mlp_deltas(spec, cache, r)
    hs = cache[1]
    parts = []
    for l, delta in enumerate(deltas):
        parts.append(np.einsum("ij,ik->ijk", hs[l], delta).reshape(m, -1))
        parts.append(delta)
    return np.hstack(parts)


def per_example_dots(spec: ModelSpec, params, data: Dataset, rows, vec, chunk_floats=1 << 22):
    """``per_example_grads(rows) @ vec`` evaluated in memory-bounded chunks."""
    rows = np.asarray(rows, dtype=np.int64).reshape(-1)
    step = max(1, chunk_floats // max(1, param_count(spec)))
    out = np.empty(rows.size)
    for start in range(0, rows.size, step):
        part = rows[start : start + step]
        out[start : start + part.size] = per_example_grads(spec, params, data, part) @ vec
    return out


def _require_logistic(spec, what):
    if not isinstance(spec, MultinomialLogistic):
        raise UnsupportedSpecError(f"{what} unsupported for spec {type(spec).__name__}")


def hessian(spec: ModelSpec, params, data: Dataset, indices=None) -> np.ndarray:
    """Exact Hessian of the regularised mean loss (logistic only)."""
    _require_logistic(spec, "hessian")
    params = _check_params(spec, params)
    X, _ = _rows(data, indices)
    m = X.shape[0]
    A = _augment(X)
    q, C = A.shape[1], spec.n_classes
    P = np.exp(log_softmax(A @ params.reshape(q, C), axis=1))
    # sum_i x x^T (diag(p) - p p^T), arranged to match the (q, C) row-major layout
    B = (A[:, :, None] * P[:, None, :]).reshape(m, q * C)
    H = -(B.T @ B)
    H4 = H.reshape(q, C, q, C)
    for c in range(C):
        H4[:, c, :, c] += (A * P[:, c : c + 1]).T @ A
    H /= m
    H = 0.5 * (H + H.T)
    H[np.diag_indices_from(H)] += spec.l2
    return H


def hvp(spec: ModelSpec, params, data: Dataset, v, indices=None) -> np.ndarray:
    """Hessian-vector product without forming the Hessian (logistic only)."""
    _require_logistic(spec, "hvp")
    params = _check_params(spec, params)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != params.shape:
        raise ConfigError(f"vector length {v.shape} does not match {params.shape}")
    X, _ = _rows(data, indices)
    m = X.shape[0]
    A = _augment(X)
    q, C = A.shape[1], spec.n_classes
    P = np.exp(log_softmax(A @ params.reshape(q, C), axis=1))
    U = A @ v.reshape(q, C)
    SU = P * U - P * np.sum(P * U, axis=1, keepdims=True)
    return (A.T @ SU).ravel() / m + spec.l2 * v
