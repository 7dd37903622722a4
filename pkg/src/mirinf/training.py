"""Trainers: deterministic Newton for the convex model, seeded SGD with
checkpoints, and the continual update used by Forward-INF."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg
from scipy.sparse.linalg import LinearOperator, cg

from . import models
from .data import Dataset
from .errors import ConfigError, ConvergenceError, DivergenceError, EmptyBatchError, SolveError
from .models import ModelSpec, MultinomialLogistic

# above this parameter count Newton directions come from CG on Hessian-vector products
DENSE_NEWTON_LIMIT = 3000
DIVERGENCE_LOSS = 1e6


@dataclass(frozen=True)
class DetTrainConfig:
    grad_tol: float = 1e-9
    max_iters: int = 100
    # overrides the model's l2 when set
    l2: Optional[float] = None

    def __post_init__(self):
        if not self.grad_tol > 0:
            raise ConfigError("grad_tol must be > 0")
        if self.max_iters < 1:
            raise ConfigError("max_iters must be >= 1")
        if self.l2 is not None and self.l2 < 0:
            raise ConfigError("l2 must be >= 0")


@dataclass(frozen=True)
class SgdConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.001
    batch_size: int = 32
    epochs: int = 20
    seed: int = 0
    checkpoint_every: int = 1

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.batch_size < 1 or self.epochs < 1 or self.checkpoint_every < 1:
            raise ConfigError("batch_size, epochs and checkpoint_every must be >= 1")
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")


@dataclass(frozen=True)
class Checkpoint:
    params: np.ndarray
    iter_index: int
    step_size: float


def trainer_to_dict(cfg) -> dict:
    kind = "deterministic" if isinstance(cfg, DetTrainConfig) else "sgd"
    return {"kind": kind, **dataclasses.asdict(cfg)}


def trainer_from_dict(cfg: dict):
    cfg = dict(cfg)
    kind = cfg.pop("kind", "deterministic")
    try:
        if kind == "deterministic":
            return DetTrainConfig(**cfg)
        if kind == "sgd":
            return SgdConfig(**cfg)
    except TypeError as exc:
        raise ConfigError(f"bad trainer config: {exc}") from None
    raise ConfigError(f"unknown trainer kind {kind!r}")


def _newton_direction(spec, params, data, g):
    p = params.size
    if p <= DENSE_NEWTON_LIMIT:
        H = models.hessian(spec, params, data)
        try:
            factor = scipy.linalg.cho_factor(H)
        except np.linalg.LinAlgError as exc:
            raise SolveError(f"hessian not positive definite: {exc}") from None
        return -scipy.linalg.cho_solve(factor, g)
    op = LinearOperator((p, p), matvec=lambda v: models.hvp(spec, params, data, v))
    step, _ = cg(op, -g, rtol=1e-10, atol=0.0, maxiter=10 * p)
    return step


def train_deterministic(
    spec: ModelSpec, data: Dataset, cfg: DetTrainConfig, warm_start=None
) -> np.ndarray:
    """Damped Newton with backtracking until ``||grad||_2 <= grad_tol``.

    The objective is strictly convex when l2 > 0, so the result does not
    depend on ``warm_start`` beyond the tolerance.
    """
    if not isinstance(spec, MultinomialLogistic):
        raise ConfigError("deterministic training needs the logistic model")
    if data.n == 0:
        raise EmptyBatchError()
    if cfg.l2 is not None:
        spec = dataclasses.replace(spec, l2=cfg.l2)
    params = models.init_params(spec) if warm_start is None else np.array(warm_start, dtype=float)
    f = models.loss(spec, params, data).mean
    g = models.grad(spec, params, data)
    gnorm = float(np.linalg.norm(g))
    for it in range(cfg.max_iters):
        if gnorm <= cfg.grad_tol:
            return params
        step = _newton_direction(spec, params, data, g)
        slope = float(g @ step)
        if slope >= 0:
            step, slope = -g, -gnorm * gnorm
        t = 1.0
        while True:
            cand = params + t * step
            f_new = models.loss(spec, cand, data).mean
            if f_new <= f + 1e-4 * t * slope:
                break
            g_new = models.grad(spec, cand, data)
            # near the optimum the objective stops resolving decreases
            if f_new <= f + 1e-13 * (1.0 + abs(f)) and np.linalg.norm(g_new) < gnorm:
                break
            t *= 0.5
            if t < 1e-12:
                raise ConvergenceError(gnorm, it)
        params, f = cand, f_new
        g = models.grad(spec, params, data)
        gnorm = float(np.linalg.norm(g))
    if gnorm <= cfg.grad_tol:
        return params
    raise ConvergenceError(gnorm, cfg.max_iters)


def epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    # counter-based stream keyed on (seed, epoch)
    rng = np.random.Generator(np.random.Philox(key=[seed, epoch]))
    return rng.permutation(n)


def train_sgd(spec: ModelSpec, data: Dataset, cfg: SgdConfig, init=None):
    """Mini-batch SGD with momentum; returns final params and checkpoints.

    ``weight_decay`` is applied by the optimiser on top of the model's own l2.
    Checkpoints are taken at the end of every ``checkpoint_every``-th epoch.
    """
    if data.n == 0:
        raise EmptyBatchError()
    params = models.init_params(spec, cfg.seed) if init is None else np.array(init, dtype=float)
    buf = np.zeros_like(params)
    checkpoints = []
    step = 0
    for epoch in range(cfg.epochs):
        perm = epoch_permutation(cfg.seed, epoch, data.n)
        for start in range(0, data.n, cfg.batch_size):
            batch = perm[start : start + cfg.batch_size]
            g = models.grad(spec, params, data, batch)
            if cfg.weight_decay:
                g = g + cfg.weight_decay * params
            if cfg.momentum:
                buf = cfg.momentum * buf + g
                g = buf
            params = params - cfg.lr * g
            step += 1
        if not np.all(np.isfinite(params)):
            raise DivergenceError(step)
        if (epoch + 1) % cfg.checkpoint_every == 0:
            checkpoints.append(Checkpoint(params.copy(), step, cfg.lr))
    return params, checkpoints


def continual_update(
    spec: ModelSpec, params, tst: Dataset, K: int, alpha: float, direction: str = "ascent"
) -> np.ndarray:
    """``K`` full-batch gradient steps on the regularised loss over ``tst``."""
    if K < 0 or not alpha > 0:
        raise ConfigError("continual update needs K >= 0 and alpha > 0")
    if direction not in ("ascent", "descent"):
        raise ConfigError(f"unknown direction {direction!r}")
    theta = np.array(params, dtype=np.float64)
    sign = 1.0 if direction == "ascent" else -1.0
    for j in range(K):
        value = models.loss(spec, theta, tst).mean
        if not np.isfinite(value) or value > DIVERGENCE_LOSS:
            raise DivergenceError(j)
        theta = theta + (sign * alpha) * models.grad(spec, theta, tst)
        if not np.all(np.isfinite(theta)):
            raise DivergenceError(j)
    return theta


def fit(spec: ModelSpec, data: Dataset, trainer, seed: int = 0, warm_start=None) -> np.ndarray:
    """Run ``trainer`` on ``data``; SGD trainers take their seed from ``seed``.

    ``warm_start`` is honoured only by the deterministic trainer.
    """
    if isinstance(trainer, DetTrainConfig):
        return train_deterministic(spec, data, trainer, warm_start)
    if isinstance(trainer, SgdConfig):
        return train_sgd(spec, data, dataclasses.replace(trainer, seed=seed))[0]
    raise ConfigError(f"unsupported trainer {trainer!r}")
