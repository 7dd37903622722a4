"""End-to-end experiment pipelines behind ``mirinf run``.

Every pipeline writes ``scores.csv``, ``report.json`` and ``manifest.json``
(plus ``corruption.json`` and ``curves.csv`` where relevant) into the output
directory. These files are reproducible byte for byte. Wall-clock
measurements go to ``timing.json``, the only file that changes between runs.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import analysis, estimators, models, oracles, training
from .data import CorruptionLog, Dataset, inject_leak, inject_mislabels, load_dataset, split
from .errors import ConfigError, MirinfError, NumericalError
from .estimators import ForwardInfConfig, InfluenceReport, LissaConfig

EXPERIMENTS = (
    "corr-point",
    "corr-group",
    "leakage",
    "mislabel",
    "fwd-vs-oracle",
    "continual-vs-scratch",
    "bench",
)


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    dataset: object
    model: dict
    trainer: dict
    estimators: dict = field(default_factory=dict)
    root_seed: int = 0
    output_path: str = "runs/out"
    # experiment-specific sizes and switches, see PROTOCOL_DEFAULTS
    protocol: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}")
        if not isinstance(self.root_seed, int) or self.root_seed < 0:
            raise ConfigError("root_seed must be a non-negative integer")
        unknown = set(self.protocol) - set(PROTOCOL_DEFAULTS[self.experiment])
        if unknown:
            raise ConfigError(f"unknown protocol keys for {self.experiment}: {sorted(unknown)}")
        # fail early on invalid sub-configs
        models.spec_from_dict(self.model)
        training.trainer_from_dict(self.trainer)
        for key, cfg in self.estimators.items():
            _estimator_config(key, cfg)

    @classmethod
    def from_dict(cls, cfg: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(cfg) - names
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        try:
            return cls(**cfg)
        except TypeError as exc:
            raise ConfigError(f"bad experiment config: {exc}") from None

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def setting(self, key):
        return self.protocol.get(key, PROTOCOL_DEFAULTS[self.experiment][key])


_GROUPS = {"n_train": 3000, "n_test": 500, "n_groups": 30, "ratio_lo": 0.0, "ratio_hi": 1.0,
           "n_seeds": 5}

PROTOCOL_DEFAULTS = {
    "corr-point": {"n_train": 1050, "n_test_pool": 200, "n_test_points": 10},
    "corr-group": dict(_GROUPS),
    "fwd-vs-oracle": dict(_GROUPS),
    "continual-vs-scratch": dict(_GROUPS, n_seeds=1),
    "leakage": {"n_train": 3000, "n_test_pool": 500, "n_leaks": 20, "tune_fraction": 0.2,
                "tracin_checkpoints": 1},
    "mislabel": {"ratio": 0.2, "inspect_fraction": 0.2},
    "bench": {"n_points": 200, "repeats": 5},
}

_ESTIMATOR_TYPES = {"forward_inf": ForwardInfConfig, "lissa": LissaConfig,
                    "continual": oracles.AdditionMode}


def _estimator_config(key, cfg):
    if key == "tune":
        if not cfg.get("Ks") or not cfg.get("alphas"):
            raise ConfigError("tune needs non-empty 'Ks' and 'alphas'")
        return cfg
    if key not in _ESTIMATOR_TYPES:
        raise ConfigError(f"unknown estimator config {key!r}")
    if key == "continual":
        cfg = dict(cfg, kind="continual")
    try:
        return _ESTIMATOR_TYPES[key](**cfg)
    except TypeError as exc:
        raise ConfigError(f"bad {key} config: {exc}") from None


def derive_seed(root_seed: int, label: str) -> int:
    """Seed for one purpose; independent of every other label."""
    digest = hashlib.sha256(f"{root_seed}/{label}".encode()).digest()
    return int.from_bytes(digest[:4], "big")


def content_hash(cfg: ExperimentConfig, data: Dataset) -> str:
    """Git-style blob hash over the canonical config and the dataset contents.

    The output path is not an input and is left out.
    """
    inputs = {k: v for k, v in cfg.to_dict().items() if k != "output_path"}
    body = json.dumps(inputs, sort_keys=True).encode()
    body += np.ascontiguousarray(data.features).tobytes() + data.labels.astype("<i8").tobytes()
    body += "\n".join(data.ids).encode()
    return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()


@dataclass
class RunManifest:
    config: dict
    seeds: dict = field(default_factory=dict)
    files: list = field(default_factory=list)
    corruption_log: Optional[str] = None
    input_hash: str = ""
    # wall-clock totals live in this file so the manifest stays reproducible
    wall_clock: str = "timing.json"
    status: str = "ok"
    failed_stage: Optional[str] = None
    error: Optional[str] = None
    flags: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def to_dict(self):
        return dataclasses.asdict(self)


class _Run:
    """Output directory, seeds and stage bookkeeping for one experiment."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.out = Path(cfg.output_path)
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest = RunManifest(config=cfg.to_dict())
        self.timing = {}
        self.score_rows = []
        self.report = {"experiment": cfg.experiment, "reports": [], "correlations": {},
                       "metrics": {}}
        self.stage_name = None

    def seed(self, label):
        value = derive_seed(self.cfg.root_seed, label)
        self.manifest.seeds[label] = value
        return value

    def stage(self, name):
        run = self

        class _Stage:
            def __enter__(self):
                run.stage_name = name
                self.start = time.perf_counter()

            def __exit__(self, *exc):
                run.timing[name] = time.perf_counter() - self.start
                return False

        return _Stage()

    def add_report(self, report: InfluenceReport, label=None):
        method = label or report.method
        self.report["reports"].append(dict(report.to_dict(with_timing=False), label=method))
        self.score_rows += [(sid, method, s) for sid, s in zip(report.source_ids, report.scores)]
        self.timing[f"report/{method}"] = dict(report.timing)

    def write_json(self, name, obj):
        path = self.out / name
        path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        if name not in self.manifest.files:
            self.manifest.files.append(name)

    def write_text(self, name, text):
        (self.out / name).write_text(text, encoding="utf-8")
        if name not in self.manifest.files:
            self.manifest.files.append(name)

    def write_log(self, log: CorruptionLog):
        self.write_json("corruption.json", log.to_dict())
        self.manifest.corruption_log = "corruption.json"

    def finish(self):
        lines = ["source_id,method,score"]
        lines += [f"{_csv(sid)},{_csv(m)},{float(s)!r}" for sid, m, s in self.score_rows]
        self.write_text("scores.csv", "\n".join(lines) + "\n")
        self.write_json("report.json", self.report)
        self.write_json("timing.json", self.timing)
        for name in ("manifest.json",):
            if name not in self.manifest.files:
                self.manifest.files.append(name)
        self.write_json("manifest.json", self.manifest.to_dict())


def _csv(text):
    text = str(text)
    if any(c in text for c in ',"\n'):
        return '"' + text.replace('"', '""') + '"'
    return text


# --- shared building blocks ------------------------------------------------------


def _spec(cfg, data: Dataset):
    spec = models.spec_from_dict(cfg.model)
    d = spec.d if isinstance(spec, models.MultinomialLogistic) else spec.layer_widths[0]
    if d != data.d or spec.n_classes != data.n_classes:
        raise ConfigError(
            f"model expects d={d}, C={spec.n_classes}; data has d={data.d}, C={data.n_classes}"
        )
    return spec


def _oracle_config(run: _Run, trainer, n_seeds):
    if isinstance(trainer, training.DetTrainConfig):
        return oracles.OracleConfig(trainer=trainer)
    seeds = tuple(run.seed(f"sgd/{k}") for k in range(n_seeds))
    return oracles.OracleConfig(trainer=trainer, seeds=seeds)


def _fwd_cfg(cfg, **defaults):
    return ForwardInfConfig(**dict(defaults, **cfg.estimators.get("forward_inf", {})))


def _groups_setup(run: _Run, data: Dataset):
    cfg = run.cfg
    n_train, n_test = cfg.setting("n_train"), cfg.setting("n_test")
    with run.stage("split"):
        trn, tst = split(data, [n_train, n_test], run.seed("split"))
    with run.stage("corrupt"):
        noisy, part, log = oracles.build_noisy_groups(
            trn, cfg.setting("n_groups"), cfg.setting("ratio_lo"), cfg.setting("ratio_hi"),
            run.seed("groups"),
        )
        run.write_log(log)
    return noisy, tst, part


def _reference_models(spec, noisy, ocfg):
    return {s: oracles._train(spec, noisy, ocfg, s) for s in ocfg.run_seeds}


def _oracle_report(method, part, scores, ocfg):
    return InfluenceReport(method, list(part.names), scores,
                           {"trainer": training.trainer_to_dict(ocfg.trainer)},
                           list(ocfg.run_seeds))


# --- pipelines ---------------------------------------------------------------------


def _corr_point(run: _Run, data: Dataset):
    cfg = run.cfg
    spec = _spec(cfg, data)
    trainer = training.trainer_from_dict(cfg.trainer)
    ocfg = _oracle_config(run, trainer, 1)
    with run.stage("split"):
        trn, pool = split(data, [cfg.setting("n_train"), cfg.setting("n_test_pool")],
                          run.seed("split"))
    part = oracles.SourcePartition.points(trn)
    with run.stage("train"):
        ref = _reference_models(spec, trn, ocfg)
    with run.stage("select"):
        seed0 = ocfg.run_seeds[0]
        losses = models.per_example_losses(spec, ref[seed0], pool)
        picked = analysis.ranking(losses)[: cfg.setting("n_test_points")]
        tsts = [pool.subset([j]) for j in picked]
        run.report["metrics"]["test_points"] = [pool.ids[j] for j in picked]
    with run.stage("oracle-t2t"):
        removal = oracles.removal_scores(spec, trn, part, tsts, ocfg, reference=ref)
    results = []
    with run.stage("oracle-tst2trn"):
        for t, tset in enumerate(tsts):
            added = oracles.addition_scores(spec, trn, part, tset, ocfg, reference=ref)
            tag = tset.ids[0]
            run.add_report(_oracle_report("oracle-t2t", part, removal[t], ocfg),
                           f"oracle-t2t[{tag}]")
            run.add_report(_oracle_report("oracle-tst2trn", part, added, ocfg),
                           f"oracle-tst2trn[{tag}]")
            res = analysis.correlate(removal[t], added)
            run.report["correlations"][f"oracle-t2t~oracle-tst2trn[{tag}]"] = res.to_dict()
            results.append(res)
    mean = analysis.mean_correlation(results)
    run.report["correlations"]["oracle-t2t~oracle-tst2trn"] = mean.to_dict()
    run.manifest.summary = {"pearson": mean.pearson, "spearman": mean.spearman}


def _corr_group(run: _Run, data: Dataset, with_forward: bool):
    cfg = run.cfg
    spec = _spec(cfg, data)
    trainer = training.trainer_from_dict(cfg.trainer)
    noisy, tst, part = _groups_setup(run, data)
    ocfg = _oracle_config(run, trainer, cfg.setting("n_seeds"))
    with run.stage("train"):
        ref = _reference_models(spec, noisy, ocfg)
    with run.stage("oracle-tst2trn"):
        added = oracles.addition_scores(spec, noisy, part, tst, ocfg, reference=ref)
    run.add_report(_oracle_report("oracle-tst2trn", part, added, ocfg))
    if with_forward:
        fcfg = _fwd_cfg(cfg, sign_mode="mirrored")
        with run.stage("forward-inf"):
            per_seed = [estimators.forward_inf(spec, ref[s], noisy, part, tst, fcfg)
                        for s in ocfg.run_seeds]
        fwd = InfluenceReport("forward-inf", list(part.names),
                              np.mean([r.scores for r in per_seed], axis=0), dataclasses.asdict(fcfg),
                              list(ocfg.run_seeds))
        fwd.timing = {k: sum(r.timing[k] for r in per_seed) for k in per_seed[0].timing}
        run.add_report(fwd)
        res = analysis.correlate(fwd.scores, added)
        run.report["correlations"]["forward-inf~oracle-tst2trn"] = res.to_dict()
        run.manifest.summary = {"pearson": res.pearson, "spearman": res.spearman}
        return
    with run.stage("oracle-t2t"):
        removal = oracles.removal_scores(spec, noisy, part, tst, ocfg, reference=ref)
    run.add_report(_oracle_report("oracle-t2t", part, removal, ocfg))
    res = analysis.correlate(removal, added)
    run.report["correlations"]["oracle-t2t~oracle-tst2trn"] = res.to_dict()
    run.manifest.summary = {"pearson": res.pearson, "spearman": res.spearman}


def _continual_vs_scratch(run: _Run, data: Dataset):
    cfg = run.cfg
    spec = _spec(cfg, data)
    trainer = training.trainer_from_dict(cfg.trainer)
    noisy, tst, part = _groups_setup(run, data)
    ocfg = _oracle_config(run, trainer, cfg.setting("n_seeds"))
    mode = _estimator_config("continual", cfg.estimators.get("continual", {"K": 10, "alpha": 0.1}))
    with run.stage("train"):
        ref = _reference_models(spec, noisy, ocfg)
    with run.stage("oracle-scratch"):
        scratch = oracles.addition_scores(spec, noisy, part, tst, ocfg, reference=ref)
    with run.stage("oracle-continual"):
        ccfg = dataclasses.replace(ocfg, addition_mode=mode)
        cont = oracles.addition_scores(spec, noisy, part, tst, ccfg, reference=ref)
    run.add_report(_oracle_report("oracle-tst2trn", part, scratch, ocfg), "oracle-tst2trn-scratch")
    rep = _oracle_report("oracle-tst2trn", part, cont, ocfg)
    rep.hyperparams["addition_mode"] = dataclasses.asdict(mode)
    run.add_report(rep, "oracle-tst2trn-continual")
    res = analysis.correlate(scratch, cont)
    run.report["correlations"]["scratch~continual"] = res.to_dict()
    run.manifest.summary = {"pearson": res.pearson, "spearman": res.spearman}


@dataclass(frozen=True)
class TuneResult:
    config: ForwardInfConfig
    rate: float
    table: list
    flagged: bool
    note: str = ""


def tune_forward_inf(spec, data: Dataset, params, candidate_Ks, candidate_alphas, seed: int,
                     targets=None, m: int = 10, direction: str = "ascent") -> TuneResult:
    """Pick ``(K, alpha)`` by top-1 self-retrieval of planted duplicates.

    ``m`` random training points are copied out as pseudo-test points; the
    influential source for each is the point itself. ``targets`` adds further
    ``(test_point, train_index)`` pairs, such as known leaks. A candidate whose
    update diverges scores 0. Ties go to the smaller K, then the smaller alpha.
    """
    Ks, alphas = sorted(set(candidate_Ks)), sorted(set(candidate_alphas))
    if not Ks or not alphas:
        raise ConfigError("tuning needs at least one K and one alpha")
    rng = np.random.default_rng(seed)
    picks = np.sort(rng.choice(data.n, size=min(m, data.n), replace=False))
    targets = [(data.subset([i]), int(i)) for i in picks] + list(targets or [])
    if not targets:
        raise ConfigError("tuning needs at least one target")
    part = oracles.SourcePartition.points(data)
    best, table = None, []
    for K in Ks:
        for alpha in alphas:
            fcfg = ForwardInfConfig(K, alpha, direction)
            hits = []
            try:
                for point, truth in targets:
                    report = estimators.forward_inf(spec, params, data, part, point, fcfg)
                    hits.append(analysis.topk_detection(report, [data.ids[truth]], 1))
                rate = float(np.mean(hits))
            except NumericalError:
                rate = 0.0
            table.append({"K": K, "alpha": alpha, "rate": rate})
            if best is None or rate > best[1]:
                best = (fcfg, rate)
    flagged = best[0].K == 0
    note = "selected K=0: scores are identically zero, rate is the tie-break baseline" if flagged else ""
    return TuneResult(best[0], best[1], table, flagged, note)


def _leakage(run: _Run, data: Dataset):
    cfg = run.cfg
    spec = _spec(cfg, data)
    trainer = training.trainer_from_dict(cfg.trainer)
    with run.stage("split"):
        trn, pool = split(data, [cfg.setting("n_train"), cfg.setting("n_test_pool")],
                          run.seed("split"))
    with run.stage("corrupt"):
        leaked_train, leaks, log = inject_leak(trn, pool, cfg.setting("n_leaks"), run.seed("leak"))
        run.write_log(log)
    with run.stage("train"):
        if isinstance(trainer, training.SgdConfig):
            params, checkpoints = training.train_sgd(
                spec, leaked_train, dataclasses.replace(trainer, seed=run.seed("sgd/0")))
        else:
            params = training.fit(spec, leaked_train, trainer)
            checkpoints = [training.Checkpoint(params, 0, 1.0)]
    copy_of = {tid: idx for idx, tid in log.leaked().items()}
    n_tune = int(round(cfg.setting("tune_fraction") * leaks.n))
    order = np.random.default_rng(run.seed("tune-split")).permutation(leaks.n)
    tune_idx, eval_idx = np.sort(order[:n_tune]), np.sort(order[n_tune:])
    if eval_idx.size == 0:
        raise ConfigError("no leaked points left for evaluation")
    fcfg = _fwd_cfg(cfg)
    if "tune" in cfg.estimators:
        with run.stage("tune"):
            grid = cfg.estimators["tune"]
            targets = [(leaks.subset([j]), copy_of[leaks.ids[j]]) for j in tune_idx]
            tuned = tune_forward_inf(spec, leaked_train, params, grid["Ks"], grid["alphas"],
                                     run.seed("tune"), targets=targets,
                                     direction=fcfg.direction)
            fcfg = dataclasses.replace(tuned.config, sign_mode=fcfg.sign_mode)
            run.report["metrics"]["tuning"] = {"table": tuned.table, "rate": tuned.rate,
                                               "selected": dataclasses.asdict(fcfg)}
            if tuned.flagged:
                run.manifest.flags.append(tuned.note)
    run.report["metrics"]["tuning_points"] = [leaks.ids[j] for j in tune_idx]
    run.report["metrics"]["evaluation_points"] = [leaks.ids[j] for j in eval_idx]
    part = oracles.SourcePartition.points(leaked_train)
    ck = estimators.select_checkpoints(checkpoints, cfg.setting("tracin_checkpoints"))
    methods = {
        "forward-inf": lambda q: estimators.forward_inf(spec, params, leaked_train, part, q, fcfg),
        "tracin": lambda q: estimators.tracin(spec, ck, leaked_train, part, q),
    }
    if isinstance(spec, models.MultinomialLogistic) and spec.l2 > 0:
        methods["if"] = lambda q: estimators.influence_function(spec, params, leaked_train, part, q)
    rates = {}
    for name, fn in methods.items():
        with run.stage(name):
            hits, seconds = [], 0.0
            for j in eval_idx:
                point = leaks.subset([j])
                report = fn(point)
                seconds += report.timing["total_seconds"]
                truth = leaked_train.ids[copy_of[leaks.ids[j]]]
                hits.append(analysis.topk_detection(report, [truth], 1))
                run.add_report(report, f"{name}[{leaks.ids[j]}]")
            rates[name] = float(np.mean(hits))
            run.timing[f"{name}/seconds"] = seconds
    run.report["metrics"]["top1"] = rates
    run.report["metrics"]["train_test_ratio"] = leaked_train.n
    run.manifest.summary = {"top1": rates}
    if "tracin" in rates:
        run.timing["tracin_over_forward_inf"] = (
            run.timing["tracin/seconds"] / run.timing["forward-inf/seconds"]
        )


def _mislabel(run: _Run, data: Dataset):
    cfg = run.cfg
    spec = _spec(cfg, data)
    trainer = training.trainer_from_dict(cfg.trainer)
    with run.stage("corrupt"):
        noisy, log = inject_mislabels(data, cfg.setting("ratio"), run.seed("mislabel"))
        run.write_log(log)
    mask = np.zeros(noisy.n, dtype=bool)
    mask[log.mislabeled_indices()] = True
    with run.stage("train"):
        if isinstance(trainer, training.SgdConfig):
            params, checkpoints = training.train_sgd(
                spec, noisy, dataclasses.replace(trainer, seed=run.seed("sgd/0")))
        else:
            params, checkpoints = training.fit(spec, noisy, trainer), []
    fcfg = _fwd_cfg(cfg, K=1, alpha=0.1)
    reports = {}
    with run.stage("forward-inf-self"):
        reports["forward-inf-self"] = estimators.self_influence("forward-inf", spec, params,
                                                                noisy, fcfg)
    if checkpoints:
        with run.stage("tracin-self"):
            reports["tracin-self"] = estimators.self_influence("tracin", spec, checkpoints, noisy)
    if isinstance(spec, models.MultinomialLogistic) and spec.l2 > 0:
        with run.stage("if-self"):
            reports["if-self"] = estimators.self_influence("if", spec, params, noisy)
    inspect = cfg.setting("inspect_fraction")
    curves, found = [], {}
    for name, report in reports.items():
        run.add_report(report, name)
        curve = analysis.detection_curve(report, mask)
        found[name] = curve.found_at(inspect)
        curves.append((name, curve))
    lines = ["method,inspected_fraction,found_fraction"]
    for name, curve in curves:
        lines += [f"{name},{a!r},{b!r}" for a, b in
                  zip(curve.inspected_fraction.tolist(), curve.found_fraction.tolist())]
    run.write_text("curves.csv", "\n".join(lines) + "\n")
    run.report["metrics"]["found_at_inspect_fraction"] = found
    run.report["metrics"]["inspect_fraction"] = inspect
    run.report["curves"] = "curves.csv"
    run.manifest.summary = {"found": found}


def _bench(run: _Run, data: Dataset):
    cfg = run.cfg
    spec = _spec(cfg, data)
    n = min(cfg.setting("n_points"), data.n)
    with run.stage("bench"):
        result = analysis.bench_passes(spec, data.subset(range(n)), data.subset([0]),
                                       cfg.setting("repeats"),
                                       models.init_params(spec, run.seed("init")))
    # measured values are timing, not reproducible output
    run.timing["bench"] = result
    run.report["metrics"]["bench"] = "timing.json"


_PIPELINES = {
    "corr-point": _corr_point,
    "corr-group": lambda run, data: _corr_group(run, data, with_forward=False),
    "fwd-vs-oracle": lambda run, data: _corr_group(run, data, with_forward=True),
    "continual-vs-scratch": _continual_vs_scratch,
    "leakage": _leakage,
    "mislabel": _mislabel,
    "bench": _bench,
}


def run_experiment(cfg: ExperimentConfig) -> RunManifest:
    """Run one pipeline and write its artifacts.

    Any failure writes a partial manifest naming the failed stage and then
    re-raises the error with its ``stage`` attribute set.
    """
    run = _Run(cfg)
    start = time.perf_counter()
    try:
        with run.stage("load"):
            data = load_dataset(cfg.dataset)
        run.manifest.input_hash = content_hash(cfg, data)
        _PIPELINES[cfg.experiment](run, data)
    except (MirinfError, ValueError, ArithmeticError, TypeError, OSError) as exc:
        run.manifest.status = "failed"
        run.manifest.failed_stage = run.stage_name
        run.manifest.error = f"{type(exc).__name__}: {exc}"
        run.timing["total"] = time.perf_counter() - start
        run.write_json("timing.json", run.timing)
        run.manifest.files.append("manifest.json")
        run.write_json("manifest.json", run.manifest.to_dict())
        exc.stage = run.stage_name
        raise
    run.timing["total"] = time.perf_counter() - start
    run.finish()
    return run.manifest
