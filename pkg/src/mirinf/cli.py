"""``mirinf`` command line: run / influence / bench / tune.

Exit codes: 0 success, 1 configuration or data error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import analysis, estimators, experiments, models, oracles, training
from .data import Dataset, load_dataset, split
from .errors import ConfigError, NumericalError

METHODS = ("forward-inf", "if", "if-lissa", "tracin", "oracle-t2t", "oracle-tst2trn")


def parse_model(text: str, data: Dataset, l2: float) -> models.ModelSpec:
    """``logistic`` or ``mlp:64,64`` (hidden widths) for the given data."""
    kind, _, rest = text.partition(":")
    if kind == "logistic":
        return models.MultinomialLogistic(data.d, data.n_classes, l2)
    if kind == "mlp":
        try:
            hidden = [int(w) for w in rest.split(",") if w]
        except ValueError:
            raise ConfigError(f"bad hidden widths {rest!r}") from None
        return models.Mlp((data.d, *hidden), data.n_classes, "relu", l2)
    raise ConfigError(f"unknown model {text!r}; use 'logistic' or 'mlp:W1,W2,...'")


def _trainer(args, spec):
    if isinstance(spec, models.MultinomialLogistic) and args.trainer == "auto":
        return training.DetTrainConfig(grad_tol=args.grad_tol)
    if args.trainer == "deterministic":
        return training.DetTrainConfig(grad_tol=args.grad_tol)
    return training.SgdConfig(lr=args.lr, momentum=args.momentum, weight_decay=args.weight_decay,
                              epochs=args.epochs, seed=args.seed)


def _add_model_args(p):
    p.add_argument("--data", required=True, help="blobs:n=..,d=..,C=.. | csv:PATH | idx:IMG,LBL")
    p.add_argument("--model", default="logistic", help="logistic | mlp:W1,W2,...")
    p.add_argument("--l2", type=float, default=0.01)
    p.add_argument("--trainer", choices=("auto", "deterministic", "sgd"), default="auto")
    p.add_argument("--grad-tol", type=float, default=1e-9)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mirinf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment from a JSON config")
    p.add_argument("--config", required=True)

    p = sub.add_parser("influence", help="score every training point against test points")
    _add_model_args(p)
    p.add_argument("--method", choices=METHODS, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--test-size", type=int, default=1,
                   help="points split off the data as the test set")
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--alpha", type=float, default=0.01)
    p.add_argument("--direction", choices=("ascent", "descent"), default="ascent")
    p.add_argument("--sign-mode", choices=("raw", "mirrored"), default="raw")
    p.add_argument("--depth", type=int, default=100)
    p.add_argument("--scale", type=float, default=0.1)
    p.add_argument("--damping", type=float, default=0.0)
    p.add_argument("--checkpoints", type=int, default=1, help="TracIn checkpoint count")

    p = sub.add_parser("bench", help="time per-point forward and backward passes")
    _add_model_args(p)
    p.add_argument("--points", type=int, default=200)
    p.add_argument("--repeats", type=int, default=5)

    p = sub.add_parser("tune", help="choose Forward-INF K and alpha by duplicate retrieval")
    _add_model_args(p)
    p.add_argument("--ks", default="1,2,5")
    p.add_argument("--alphas", default="0.01,0.1,1")
    p.add_argument("--targets", type=int, default=10)
    return parser


def _cmd_run(args):
    cfg = experiments.ExperimentConfig.from_json(args.config)
    manifest = experiments.run_experiment(cfg)
    print(json.dumps({"output_path": cfg.output_path, "summary": manifest.summary,
                      "flags": manifest.flags}, indent=2, sort_keys=True))


def _cmd_influence(args):
    data = load_dataset(args.data)
    if not 1 <= args.test_size < data.n:
        raise ConfigError("--test-size must be in [1, n)")
    trn, tst = split(data, [data.n - args.test_size, args.test_size], args.seed)
    spec = parse_model(args.model, trn, args.l2)
    trainer = _trainer(args, spec)
    part = oracles.SourcePartition.points(trn)
    checkpoints = None
    if isinstance(trainer, training.SgdConfig):
        params, checkpoints = training.train_sgd(spec, trn, trainer)
    else:
        params = training.fit(spec, trn, trainer)
    m = args.method
    if m == "forward-inf":
        cfg = estimators.ForwardInfConfig(args.k, args.alpha, args.direction, args.sign_mode)
        report = estimators.forward_inf(spec, params, trn, part, tst, cfg)
    elif m in ("if", "if-lissa"):
        lissa = None
        if m == "if-lissa":
            lissa = estimators.LissaConfig(args.depth, args.scale, args.damping, seed=args.seed)
        report = estimators.influence_function(spec, params, trn, part, tst, lissa)
    elif m == "tracin":
        if not checkpoints:
            checkpoints = [training.Checkpoint(params, 0, 1.0)]
        ck = estimators.select_checkpoints(checkpoints, args.checkpoints)
        report = estimators.tracin(spec, ck, trn, part, tst)
    else:
        ocfg = oracles.OracleConfig(trainer=trainer, seeds=(args.seed,))
        fn = oracles.removal_scores if m == "oracle-t2t" else oracles.addition_scores
        report = estimators.InfluenceReport(m, list(part.names), fn(spec, trn, part, tst, ocfg),
                                            {"trainer": training.trainer_to_dict(trainer)},
                                            [args.seed])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = ["source_id,method,score"] + [
        f"{experiments._csv(sid)},{report.method},{float(s)!r}"
        for sid, s in zip(report.source_ids, report.scores)
    ]
    (out / "scores.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    body = dict(report.to_dict(), test_ids=list(tst.ids), model=models.spec_to_dict(spec))
    (out / "report.json").write_text(json.dumps(body, indent=2) + "\n", encoding="utf-8")
    top = analysis.ranking(report.scores)[:5]
    print(json.dumps({"method": report.method, "top": [report.source_ids[i] for i in top],
                      "warnings": report.warnings}, indent=2))


def _cmd_bench(args):
    data = load_dataset(args.data)
    spec = parse_model(args.model, data, args.l2)
    n = min(args.points, data.n)
    result = analysis.bench_passes(spec, data.subset(range(n)), data.subset([0]), args.repeats,
                                   models.init_params(spec, args.seed))
    print(json.dumps(result, indent=2))


def _floats(text, kind=float):
    try:
        return [kind(x) for x in text.split(",") if x]
    except ValueError:
        raise ConfigError(f"bad list {text!r}") from None


def _cmd_tune(args):
    data = load_dataset(args.data)
    spec = parse_model(args.model, data, args.l2)
    params = training.fit(spec, data, _trainer(args, spec), args.seed)
    result = experiments.tune_forward_inf(spec, data, params, _floats(args.ks, int),
                                          _floats(args.alphas), args.seed, m=args.targets)
    print(json.dumps({"selected": dataclasses.asdict(result.config), "rate": result.rate,
                      "flagged": result.flagged, "table": result.table}, indent=2))


_COMMANDS = {"run": _cmd_run, "influence": _cmd_influence, "bench": _cmd_bench,
             "tune": _cmd_tune}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _COMMANDS[args.command](args)
    except NumericalError as exc:
        print(f"mirinf: numerical failure{_where(exc)}: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, ValueError, TypeError, OSError) as exc:
        print(f"mirinf: error{_where(exc)}: {exc}", file=sys.stderr)
        return 1
    return 0


def _where(exc):
    stage = getattr(exc, "stage", None)
    return f" in stage {stage!r}" if stage else ""


if __name__ == "__main__":
    sys.exit(main())
