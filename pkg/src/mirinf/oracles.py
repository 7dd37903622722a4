"""Ground-truth influence by actual retraining.

``removal_scores`` removes each source and retrains; ``addition_scores`` adds the
test set to training (from scratch, or by a continual update of the trained
model) and measures the change in each source's loss. All losses are mean
per-example cross-entropy without the regulariser: the two models being
compared differ, so an L2 term would not cancel.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

from . import models
from .data import CorruptionEntry, CorruptionLog, Dataset, flip_labels
from .errors import ConfigError, DataError, EmptyBatchError
from .parallel import parallel_map
from .training import DetTrainConfig, SgdConfig, continual_update, fit


@dataclass(frozen=True)
class SourcePartition:
    sources: tuple
    names: tuple

    def __post_init__(self):
        sources = tuple(np.asarray(s, dtype=np.int64).reshape(-1) for s in self.sources)
        names = tuple(str(n) for n in self.names)
        if len(sources) != len(names):
            raise DataError("one name per source required")
        seen = set()
        for s, name in zip(sources, names):
            if s.size == 0:
                raise DataError(f"source {name!r} is empty")
            if s.min() < 0:
                raise DataError(f"source {name!r} has a negative index")
            if seen.intersection(s.tolist()) or len(set(s.tolist())) != s.size:
                raise DataError("sources must be pairwise disjoint")
            seen.update(s.tolist())
        object.__setattr__(self, "sources", sources)
        object.__setattr__(self, "names", names)

    def __len__(self):
        return len(self.sources)

    @classmethod
    def points(cls, data: Dataset) -> "SourcePartition":
        return cls(tuple([i] for i in range(data.n)), data.ids)

    def check(self, data: Dataset):
        for s in self.sources:
            if s.max() >= data.n:
                raise DataError(f"source index {int(s.max())} out of range for n={data.n}")

    def to_dict(self):
        return {"names": list(self.names), "sources": [s.tolist() for s in self.sources]}


@dataclass(frozen=True)
class AdditionMode:
    """How ``A(D_trn U D_tst)`` is obtained: retraining (``scratch``) or a
    continual update of ``A(D_trn)`` on the test set."""

    kind: str = "scratch"
    K: int = 0
    alpha: float = 0.01
    direction: str = "descent"

    def __post_init__(self):
        if self.kind not in ("scratch", "continual"):
            raise ConfigError(f"unknown addition mode {self.kind!r}")


@dataclass(frozen=True)
class OracleConfig:
    trainer: Union[DetTrainConfig, SgdConfig] = field(default_factory=DetTrainConfig)
    seeds: tuple = (0,)
    addition_mode: AdditionMode = field(default_factory=AdditionMode)
    # deterministic retrainings start from the full-data minimiser
    warm_start: bool = True

    def __post_init__(self):
        if len(self.seeds) == 0:
            raise ConfigError("at least one seed required")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))

    @property
    def run_seeds(self):
        return (0,) if isinstance(self.trainer, DetTrainConfig) else self.seeds


def _train(spec, data, cfg: OracleConfig, seed, warm=None):
    return fit(spec, data, cfg.trainer, seed, warm if cfg.warm_start else None)


def removal_models(spec, data: Dataset, part: SourcePartition, cfg: OracleConfig, seed,
                   reference, sources=None, threads=None) -> list:
    """Parameters of ``A(D_trn minus D_i)`` for each requested source."""
    part.check(data)
    sources = range(len(part)) if sources is None else sources

    def one(i):
        reduced = data.without(part.sources[i])
        if reduced.n == 0:
            raise EmptyBatchError(f"removing source {part.names[i]!r} leaves no training data")
        return _train(spec, reduced, cfg, seed, reference)

    return parallel_map(one, sources, threads)


def _as_list(tst):
    if isinstance(tst, Dataset):
        return [tst], True
    return list(tst), False


def removal_scores(spec, data: Dataset, part: SourcePartition, tst, cfg: OracleConfig,
                   sources=None, threads=None, reference=None) -> np.ndarray:
    """``L(A(D_trn), D_tst) - L(A(D_trn minus D_i), D_tst)`` averaged over seeds.

    ``tst`` may be one dataset (result shape ``(N,)``) or a list of them
    (shape ``(T, N)``); removal models are shared across test sets.
    ``reference`` optionally supplies ``A(D_trn)`` per seed (a dict seed->params).
    """
    tsts, single = _as_list(tst)
    for t in tsts:
        if t.n == 0:
            raise EmptyBatchError()
    idx = list(range(len(part))) if sources is None else list(sources)
    total = np.zeros((len(tsts), len(idx)))
    for seed in cfg.run_seeds:
        full = reference[seed] if reference is not None else _train(spec, data, cfg, seed)
        reduced = removal_models(spec, data, part, cfg, seed, full, idx, threads)
        for t, tset in enumerate(tsts):
            base = models.data_loss(spec, full, tset)
            total[t] += [base - models.data_loss(spec, th, tset) for th in reduced]
    out = total / len(cfg.run_seeds)
    return out[0] if single else out


def added_model(spec, data: Dataset, tst: Dataset, cfg: OracleConfig, seed, reference):
    mode = cfg.addition_mode
    if mode.kind == "continual":
        return continual_update(spec, reference, tst, mode.K, mode.alpha, mode.direction)
    return _train(spec, data.concat(_fresh_ids(tst, data)), cfg, seed, reference)


def _fresh_ids(tst: Dataset, data: Dataset) -> Dataset:
    taken = set(data.ids)
    if not taken.intersection(tst.ids):
        return tst
    return Dataset(tst.features, tst.labels, tuple(f"{i}#tst" for i in tst.ids), tst.n_classes)


def addition_scores(spec, data: Dataset, part: SourcePartition, tst: Dataset,
                    cfg: OracleConfig, reference=None) -> np.ndarray:
    """``L(A(D_trn U D_tst), D_i) - L(A(D_trn), D_i)`` averaged over seeds.

    ``reference`` optionally supplies ``A(D_trn)`` per seed (a dict seed->params).
    """
    part.check(data)
    if tst.n == 0:
        raise EmptyBatchError()
    total = np.zeros(len(part))
    for seed in cfg.run_seeds:
        full = reference[seed] if reference is not None else _train(spec, data, cfg, seed)
        plus = added_model(spec, data, tst, cfg, seed, full)
        total += [
            models.data_loss(spec, plus, data, s) - models.data_loss(spec, full, data, s)
            for s in part.sources
        ]
    return total / len(cfg.run_seeds)


def _check_source(part, i, data):
    if not 0 <= i < len(part):
        raise DataError(f"source index {i} out of range")
    if data.without(part.sources[i]).n == 0:
        raise EmptyBatchError("removing the source leaves no training data")


def oracle_train_to_test(spec, data, part, i, tst, cfg: OracleConfig) -> float:
    _check_source(part, i, data)
    return float(removal_scores(spec, data, part, tst, cfg, sources=[i])[0])


def oracle_test_to_train(spec, data, part, i, tst, cfg: OracleConfig) -> float:
    _check_source(part, i, data)
    sub = SourcePartition((part.sources[i],), (part.names[i],))
    return float(addition_scores(spec, data, sub, tst, cfg)[0])


def group_ratios(n_groups: int, ratio_lo: float, ratio_hi: float) -> np.ndarray:
    return ratio_lo + np.arange(n_groups) * (ratio_hi - ratio_lo) / (n_groups - 1)


def build_noisy_groups(data: Dataset, n_groups: int, ratio_lo: float, ratio_hi: float, seed: int):
    """Random equal-size groups (remainder to the last) with linearly spaced
    mislabel ratios; flips are uniform over the wrong classes."""
    if n_groups < 2:
        raise ConfigError("n_groups must be >= 2")
    if not 0 <= ratio_lo <= ratio_hi <= 1:
        raise ConfigError("need 0 <= ratio_lo <= ratio_hi <= 1")
    size = data.n // n_groups
    if size == 0:
        raise DataError(f"{data.n} points cannot fill {n_groups} groups")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(data.n)
    groups = [np.sort(perm[g * size : (g + 1) * size]) for g in range(n_groups - 1)]
    groups.append(np.sort(perm[(n_groups - 1) * size :]))
    labels = data.labels.copy()
    entries = []
    for members, ratio in zip(groups, group_ratios(n_groups, ratio_lo, ratio_hi)):
        m = int(np.floor(ratio * members.size + 0.5))
        chosen = np.sort(rng.choice(members, size=m, replace=False))
        new = flip_labels(data.labels, chosen, data.n_classes, rng)
        labels[chosen] = new
        entries += [
            CorruptionEntry(int(i), int(data.labels[i]), int(v), "mislabel")
            for i, v in zip(chosen, new)
        ]
    part = SourcePartition(tuple(groups), tuple(f"group-{g}" for g in range(n_groups)))
    entries.sort(key=lambda e: e.index)
    return data.with_labels(labels), part, CorruptionLog(entries, seed)
