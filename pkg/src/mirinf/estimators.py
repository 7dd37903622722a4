"""Influence estimators.

* Forward-INF: a few gradient steps on the test set, then two forward passes
  per source (``L(theta_K, D_i) - L(theta_hat, D_i)``).
* Influence function, exact (Cholesky) or via the LiSSA recursion.
* TracIn over a list of checkpoints.

Pairwise IF and TracIn use unregularised per-example gradients. Source-level
reports sum point influences over the members of each source.
"""

from __future__ import annotations

import dataclasses
import time
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg

from . import models
from .data import Dataset
from .errors import ConfigError, LissaDivergedError, SolveError
from .oracles import SourcePartition
from .training import Checkpoint, continual_update


class LissaScaleWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ForwardInfConfig:
    K: int = 1
    alpha: float = 0.01
    direction: str = "ascent"
    sign_mode: str = "raw"

    def __post_init__(self):
        if self.K < 0:
            raise ConfigError("K must be >= 0")
        if not self.alpha > 0:
            raise ConfigError("alpha must be > 0")
        if self.direction not in ("ascent", "descent"):
            raise ConfigError(f"unknown direction {self.direction!r}")
        if self.sign_mode not in ("raw", "mirrored"):
            raise ConfigError(f"unknown sign mode {self.sign_mode!r}")

    @property
    def sign(self) -> float:
        # dividing by a negative epsilon flips the ascent score
        return -1.0 if self.sign_mode == "mirrored" and self.direction == "ascent" else 1.0


@dataclass(frozen=True)
class LissaConfig:
    depth: int = 100
    scale: float = 0.1
    damping: float = 0.0
    repeats: int = 1
    seed: int = 0
    full_batch: bool = True
    batch_size: int = 32

    def __post_init__(self):
        if self.depth < 0:
            raise ConfigError("depth must be >= 0")
        if not self.scale > 0:
            raise ConfigError("scale must be > 0")
        if self.damping < 0:
            raise ConfigError("damping must be >= 0")
        if self.repeats < 1 or self.batch_size < 1:
            raise ConfigError("repeats and batch_size must be >= 1")


@dataclass
class InfluenceReport:
    method: str
    source_ids: list
    scores: np.ndarray
    hyperparams: dict = field(default_factory=dict)
    seeds: list = field(default_factory=list)
    timing: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if len(self.source_ids) != self.scores.shape[0]:
            raise ConfigError("one score per source required")
        for key in ("forward_seconds", "backward_seconds", "total_seconds"):
            self.timing.setdefault(key, 0.0)
            if self.timing[key] < 0:
                raise ConfigError(f"negative timing {key}")

    def to_dict(self, with_timing=True):
        out = {
            "method": self.method,
            "source_ids": list(self.source_ids),
            "scores": [float(s) for s in self.scores],
            "hyperparams": self.hyperparams,
            "seeds": list(self.seeds),
            "warnings": list(self.warnings),
        }
        if with_timing:
            out["timing"] = dict(self.timing)
        return out


def _hp(cfg):
    return dataclasses.asdict(cfg) if cfg is not None else {}


# --- Forward-INF --------------------------------------------------------------


def forward_inf(spec, params, data: Dataset, part: SourcePartition, tst: Dataset,
                cfg: ForwardInfConfig) -> InfluenceReport:
    part.check(data)
    start = time.perf_counter()
    theta_k = continual_update(spec, params, tst, cfg.K, cfg.alpha, cfg.direction)
    t_backward = time.perf_counter() - start

    start = time.perf_counter()
    scores = models.source_losses(spec, theta_k, data, part.sources) - models.source_losses(
        spec, params, data, part.sources
    )
    t_forward = time.perf_counter() - start
    return InfluenceReport(
        "forward-inf",
        list(part.names),
        cfg.sign * scores,
        _hp(cfg),
        timing={
            "backward_seconds": t_backward,
            "forward_seconds": t_forward,
            "total_seconds": t_backward + t_forward,
        },
    )


# --- influence functions ------------------------------------------------------


class InverseHessian:
    """Cholesky factor of the Hessian at ``params``; pairwise products are
    formed as dot products of whitened gradients, so swapping the two
    arguments gives a bitwise identical value."""

    def __init__(self, spec, params, data: Dataset):
        H = models.hessian(spec, params, data)
        try:
            self.chol = scipy.linalg.cholesky(H, lower=True)
        except np.linalg.LinAlgError as exc:
            raise SolveError(f"hessian is not positive definite: {exc}") from None
        self.n = data.n

    def whiten(self, g):
        return scipy.linalg.solve_triangular(self.chol, g, lower=True)

    def solve(self, g):
        return scipy.linalg.cho_solve((self.chol, True), g)


def _point_grad(spec, params, data, index):
    return models.grad(spec, params, data, [index], regularized=False)


def if_pairwise(spec, params, data: Dataset, z_index: int, tst: Dataset, tst_index: int = 0,
                inverse: Optional[InverseHessian] = None) -> float:
    """``-(1/n) grad(z_tst)^T H^{-1} grad(z)`` with the exact Hessian."""
    if not spec.l2 > 0:
        raise SolveError("influence functions need l2 > 0 for an invertible Hessian")
    inverse = inverse or InverseHessian(spec, params, data)
    a = inverse.whiten(_point_grad(spec, params, tst, tst_index))
    b = inverse.whiten(_point_grad(spec, params, data, z_index))
    return -float(np.dot(a, b)) / data.n


def spectral_norm(matvec, dim, iters=100) -> float:
    """Largest eigenvalue of a symmetric PSD operator by power iteration."""
    # a constant start vector can sit in the softmax shift-invariant subspace
    v = np.random.Generator(np.random.Philox(key=[dim, 0])).standard_normal(dim)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = matvec(v)
        lam = float(np.linalg.norm(w))
        if lam == 0.0:
            return 0.0
        v = w / lam
    return lam


def lissa(matvec, v, depth, scale, damping=0.0, snapshot=None):
    """Truncated Neumann estimate of ``(A + damping I)^{-1} v``.

    ``h_0 = v``, ``h_t = v + (I - scale (A + damping I)) h_{t-1}``; the
    estimate is ``scale * h_depth``. When the contraction condition holds the
    iterates obey ``||h_t|| <= (t + 1) ||v||``; exceeding twice that bound
    (or leaving the finite range) is reported as divergence.
    """
    v = np.asarray(v, dtype=np.float64)
    vnorm = float(np.linalg.norm(v))
    h = v.copy()
    for t in range(1, depth + 1):
        h = v + h - scale * (matvec(h, t) + damping * h)
        hn = float(np.linalg.norm(h))
        if not np.isfinite(hn) or hn > 2.0 * (t + 1) * vnorm:
            raise LissaDivergedError(t)
        if snapshot is not None:
            snapshot(t, scale * h)
    return scale * h


def _lissa_solve(spec, params, data: Dataset, v, cfg: LissaConfig, snapshot=None):
    """Average of ``cfg.repeats`` LiSSA estimates of ``(H + damping I)^{-1} v``.

    Returns the estimate and a list of warnings.
    """
    notes = []
    full = lambda u, _t=None: models.hvp(spec, params, data, u)
    norm = spectral_norm(full, v.size)
    if cfg.scale * (norm + cfg.damping) > 1.0:
        msg = (
            f"scale * (||H|| + damping) = {cfg.scale * (norm + cfg.damping):.3g} > 1; "
            "the LiSSA recursion is not contractive"
        )
        notes.append(msg)
        warnings.warn(msg, LissaScaleWarning, stacklevel=3)
    estimates = []
    for r in range(cfg.repeats):
        if cfg.full_batch:
            matvec = full
        else:
            rng = np.random.Generator(np.random.Philox(key=[cfg.seed, r]))
            size = min(cfg.batch_size, data.n)

            def matvec(u, _t, rng=rng, size=size):
                batch = rng.choice(data.n, size=size, replace=False)
                return models.hvp(spec, params, data, u, batch)

        estimates.append(lissa(matvec, v, cfg.depth, cfg.scale, cfg.damping, snapshot))
    return np.mean(estimates, axis=0), notes


def if_lissa(spec, params, data: Dataset, z_index: int, tst: Dataset, cfg: LissaConfig,
             tst_index: int = 0) -> float:
    """LiSSA counterpart of :func:`if_pairwise`."""
    v = _point_grad(spec, params, tst, tst_index)
    h, _ = _lissa_solve(spec, params, data, v, cfg)
    return -float(h @ _point_grad(spec, params, data, z_index)) / data.n


def _source_dots(spec, params, data, part, vec):
    """``sum_{j in D_i} grad_j . vec`` per source, from per-row products."""
    rows = np.concatenate(part.sources)
    dots = models.per_example_dots(spec, params, data, rows, vec)
    cuts = np.cumsum([s.size for s in part.sources])[:-1]
    return np.array([chunk.sum() for chunk in np.split(dots, cuts)])


def influence_function(spec, params, data: Dataset, part: SourcePartition, tst: Dataset,
                       lissa_cfg: Optional[LissaConfig] = None) -> InfluenceReport:
    """IF scores of every source on the mean test loss; LiSSA when
    ``lissa_cfg`` is given, otherwise an exact solve."""
    part.check(data)
    notes = []
    start = time.perf_counter()
    g_tst = models.grad(spec, params, tst, regularized=False)
    if lissa_cfg is None:
        h = InverseHessian(spec, params, data).solve(g_tst)
    else:
        h, notes = _lissa_solve(spec, params, data, g_tst, lissa_cfg)
    scores = -_source_dots(spec, params, data, part, h) / data.n
    elapsed = time.perf_counter() - start
    return InfluenceReport(
        "if-lissa" if lissa_cfg else "if",
        list(part.names),
        scores,
        _hp(lissa_cfg),
        [lissa_cfg.seed] if lissa_cfg else [],
        {"backward_seconds": elapsed, "total_seconds": elapsed},
        notes,
    )


# --- TracIn -------------------------------------------------------------------


def tracin_pairwise(spec, checkpoints, data: Dataset, z_index: int, tst: Dataset,
                    tst_index: int = 0) -> float:
    """``sum_c eta_c grad_c(z_tst) . grad_c(z)``."""
    if not checkpoints:
        raise ConfigError("TracIn needs at least one checkpoint")
    total = 0.0
    for ck in checkpoints:
        a = _point_grad(spec, ck.params, tst, tst_index)
        b = _point_grad(spec, ck.params, data, z_index)
        total += ck.step_size * float(np.dot(a, b))
    return total


def select_checkpoints(checkpoints, count: int) -> list:
    """``count`` evenly spaced checkpoints, always including the last."""
    if count >= len(checkpoints):
        return list(checkpoints)
    if count < 1:
        raise ConfigError("need at least one checkpoint")
    n = len(checkpoints)
    picks = [int(round(n - 1 - k * n / count)) for k in reversed(range(count))]
    return [checkpoints[i] for i in picks]


def tracin(spec, checkpoints, data: Dataset, part: SourcePartition, tst: Dataset) -> InfluenceReport:
    part.check(data)
    if not checkpoints:
        raise ConfigError("TracIn needs at least one checkpoint")
    start = time.perf_counter()
    scores = np.zeros(len(part))
    for ck in checkpoints:
        g_tst = models.grad(spec, ck.params, tst, regularized=False)
        scores += ck.step_size * _source_dots(spec, ck.params, data, part, g_tst)
    elapsed = time.perf_counter() - start
    return InfluenceReport(
        "tracin",
        list(part.names),
        scores,
        {"checkpoints": [ck.iter_index for ck in checkpoints]},
        timing={"backward_seconds": elapsed, "total_seconds": elapsed},
    )


# --- self-influence -----------------------------------------------------------


def self_influence(method: str, spec, model, data: Dataset, cfg=None) -> InfluenceReport:
    """Influence of every training point on its own loss.

    ``model`` is the trained parameter vector, or a checkpoint list for
    TracIn. Forward-INF takes the whole training set as its test set.
    """
    start = time.perf_counter()
    ids = list(data.ids)
    if method == "forward-inf":
        cfg = cfg or ForwardInfConfig()
        theta_k = continual_update(spec, model, data, cfg.K, cfg.alpha, cfg.direction)
        mid = time.perf_counter()
        delta = models.per_example_losses(spec, theta_k, data) - models.per_example_losses(
            spec, model, data
        )
        end = time.perf_counter()
        return InfluenceReport(
            "forward-inf-self", ids, cfg.sign * delta, _hp(cfg),
            timing={"backward_seconds": mid - start, "forward_seconds": end - mid,
                    "total_seconds": end - start},
        )
    if method == "tracin":
        checkpoints = model
        if checkpoints and not isinstance(checkpoints[0], Checkpoint):
            raise ConfigError("TracIn self-influence needs checkpoints")
        scores = np.zeros(data.n)
        for ck in checkpoints:
            G = models.per_example_grads(spec, ck.params, data)
            scores += ck.step_size * np.einsum("ij,ij->i", G, G)
        elapsed = time.perf_counter() - start
        return InfluenceReport(
            "tracin-self", ids, scores, {"checkpoints": [ck.iter_index for ck in checkpoints]},
            timing={"backward_seconds": elapsed, "total_seconds": elapsed},
        )
    if method == "if":
        inverse = InverseHessian(spec, model, data)
        G = models.per_example_grads(spec, model, data)
        W = inverse.whiten(G.T)
        scores = np.einsum("ji,ji->i", W, W) / data.n
        elapsed = time.perf_counter() - start
        return InfluenceReport(
            "if-self", ids, scores, {},
            timing={"backward_seconds": elapsed, "total_seconds": elapsed},
        )
    raise ConfigError(f"unknown self-influence method {method!r}")
