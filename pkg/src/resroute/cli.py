"""Command-line entry point: ``resroute <verb> [options]``.

Verbs map onto pipeline stages so each column of a results table is a
separately resumable run::

    resroute synth --classes 4 --per-class 500 --seed 7 --output d/
    resroute train-rrn --data d/ --output ckpt/
    resroute train-expert --data d/ --factors 1,2,4,6,8 --jobs 4 --output ckpt/
    resroute train-baseline --method rabn --data d/ --output ckpt/
    resroute eval --method drg --data d/ --checkpoints ckpt/ --output ev/
    resroute report --evals ev/ --output out/ --format md

Exit codes: 0 success, 1 selftest failure, 2 configuration error,
3 data or I/O error, 4 numeric error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .core import ConfigError, DataError, NumericError
from .degrade import DegradeConfig, load_split, prepare, read_normalization, synth_corpus, write_json
from .harness import (
    DISPLAY_NAMES,
    METHODS,
    EvalReport,
    eval_cross,
    eval_grid,
    read_config,
    report_from_dict,
    report_to_dict,
    write_report,
)

log = logging.getLogger("resroute")

VERBS = ("prepare", "synth", "train-rrn", "train-expert", "train-baseline", "eval", "report", "selftest")
TRAINED_BASELINES = ("rabn", "da", "mstrain")
EVAL_METHODS = METHODS + ("expert",)
ARCHS = {
    "resnet18": dict(widths=(64, 128, 256, 512), blocks=(2, 2, 2, 2), stem_kernel=7,
                     epochs=80, batch_size=256),
    "small": dict(widths=(8, 16, 32, 64), blocks=(1, 1, 1, 1), stem_kernel=5,
                  epochs=30, batch_size=32),
}
DEFAULTS = dict(seed=0, lr=3e-4, jobs=1, arch="small")
REPORT_ORDER = ("mean", "max", "rabn", "da", "mstrain", "drg", "drg-oracle")
# config-file key -> argparse destination
CONFIG_DEST = {"dataset_root": "data", "output_dir": "output"}


def _factor_list(text: str) -> tuple[int, ...]:
    try:
        out = tuple(int(v) for v in text.replace(" ", "").split(",") if v)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not out:
        raise argparse.ArgumentTypeError("empty factor list")
    return out


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value file; flags take precedence")
    common.add_argument("--seed", type=int)
    common.add_argument("--output", help="directory that receives every file this verb writes")
    common.add_argument("-v", "--verbose", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", help="prepared dataset root (manifest.csv + split/xF folders)")
    data.add_argument("--factors", type=_factor_list, help="comma-separated downsample factors")

    train = argparse.ArgumentParser(add_help=False)
    train.add_argument("--arch", choices=sorted(ARCHS))
    train.add_argument("--epochs", type=int)
    train.add_argument("--batch-size", dest="batch_size", type=int)
    train.add_argument("--lr", type=float)

    geom = argparse.ArgumentParser(add_help=False)
    geom.add_argument("--size", type=int, help="base image side in pixels")
    geom.add_argument("--input-size", dest="input_size", type=int, help="network input side (default: --size)")
    geom.add_argument("--extra-factors", dest="extra_factors", type=_factor_list,
                      help="evaluation-only factors (default 12,14,16)")

    p = _Parser(prog="resroute", description="Resolution-routed expert classifiers.")
    sub = p.add_subparsers(dest="verb", metavar="VERB", parser_class=_Parser)

    s = sub.add_parser("prepare", parents=[common, geom], help="degrade a base corpus at every factor")
    s.add_argument("--input", required=True, help="corpus root with manifest.csv of base images")
    s.add_argument("--factors", type=_factor_list)

    s = sub.add_parser("synth", parents=[common, geom], help="generate and prepare a synthetic corpus")
    s.add_argument("--classes", type=int, default=4)
    s.add_argument("--per-class", dest="per_class", type=int, default=500)
    s.add_argument("--test-per-class", dest="test_per_class", type=int)
    s.add_argument("--factors", type=_factor_list)

    sub.add_parser("train-rrn", parents=[common, data, train], help="train the resolution recognizer")

    s = sub.add_parser("train-expert", parents=[common, data, train], help="train per-factor experts")
    s.add_argument("--factor", type=int, action="append", help="factor to train (repeatable; default all)")
    s.add_argument("--jobs", type=int, help="parallel worker processes")

    s = sub.add_parser("train-baseline", parents=[common, data, train], help="train a comparison method")
    s.add_argument("--method", choices=METHODS)
    s.add_argument("--source-factor", dest="source_factor", type=int, default=1)
    s.add_argument("--target-factor", dest="target_factor", type=int, default=2)
    s.add_argument("--lam", type=float, default=1.0)

    s = sub.add_parser("eval", parents=[common, data], help="evaluate a method over a factor grid")
    s.add_argument("--method", choices=EVAL_METHODS)
    s.add_argument("--checkpoints", help="directory holding rrn.pt / expert_xF.pt / baseline_*.pt")
    s.add_argument("--train-factors", dest="train_factors", type=_factor_list,
                   help="factor set the models were trained on (default 1,2,4,6,8)")
    s.add_argument("--routing", choices=("rrn", "oracle"), default="rrn")
    s.add_argument("--expert", type=int, help="factor of the expert to evaluate with --method expert")
    s.add_argument("--cross-factors", dest="cross_factors", type=_factor_list,
                   help="also fill the expert cross matrix at these factors (drg only)")
    s.add_argument("--split", default="test")
    s.add_argument("--jobs", type=int, help="expert worker threads")

    s = sub.add_parser("report", parents=[common], help="collect eval_*.json files into a table")
    s.add_argument("--evals", nargs="+", help="eval JSON files or directories containing them")
    s.add_argument("--format", choices=("csv", "md"), action="append",
                   help="output format (repeatable; default both)")

    sub.add_parser("selftest", parents=[common], help="run the built-in property checks")
    return p


# ---------------------------------------------------------------------------
# option resolution


def _merge_config(args: argparse.Namespace) -> argparse.Namespace:
    if not getattr(args, "config", None):
        return args
    for key, value in read_config(args.config).items():
        dest = CONFIG_DEST.get(key, key)
        if dest == "method" and args.verb not in ("train-baseline", "eval"):
            continue
        if getattr(args, dest, None) is None:
            setattr(args, dest, value)
    return args


def _get(args, name, default=None):
    value = getattr(args, name, None)
    if value is None:
        value = DEFAULTS.get(name, default)
    return value


def _require(args, *names):
    missing = [n for n in names if getattr(args, n, None) is None]
    if missing:
        flags = ", ".join("--" + n.replace("_", "-") for n in missing)
        raise ConfigError(f"{args.verb}: missing required option(s) {flags}")


def _degrade_config(args, factors=None) -> DegradeConfig:
    base = DegradeConfig()
    size = _get(args, "size", base.base_size)
    extra = _get(args, "extra_factors", base.eval_extra_factors)
    return DegradeConfig(base_size=size, factors=tuple(factors or base.factors),
                         eval_extra_factors=tuple(f for f in extra if f not in (factors or base.factors)),
                         net_input_size=_get(args, "input_size", base.net_input_size if args.size is None else size))


def _net_params(args, data_root) -> dict:
    arch = dict(ARCHS[_get(args, "arch")])
    for key in ("epochs", "batch_size"):
        if getattr(args, key, None) is not None:
            arch[key] = getattr(args, key)
    lr = _get(args, "lr")
    if not lr > 0:
        raise ConfigError(f"lr must be positive, got {lr}")
    if arch["epochs"] < 0 or arch["batch_size"] < 1:
        raise ConfigError("epochs must be >= 0 and batch_size >= 1")
    return dict(arch, lr=lr, normalization=read_normalization(data_root))


def _training_factors(args, data_root) -> tuple[int, ...]:
    if getattr(args, "factors", None):
        return tuple(args.factors)
    return _stored_factors(data_root)


def _stored_factors(data_root) -> tuple[int, ...]:
    norm_file = Path(data_root) / "normalization.json" if data_root else None
    if norm_file is not None and norm_file.is_file():
        with open(norm_file) as fh:
            stored = json.load(fh).get("train_factors")
        if stored:
            return tuple(int(f) for f in stored)
    return DegradeConfig().factors


def _factor_seed(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence([seed, *key]).generate_state(1)[0] & 0x7FFFFFFF)


def _load_views(root, factors, split="train"):
    xs, ys, rs = [], [], []
    for f in factors:
        X, y = load_split(root, split, f)
        xs.append(X)
        ys.append(y)
        rs.append(np.full(len(y), f))
    return xs, ys, rs


# ---------------------------------------------------------------------------
# verbs


def cmd_prepare(args) -> int:
    _require(args, "output")
    cfg = _degrade_config(args, args.factors)
    manifest = prepare(args.input, args.output, cfg, cfg.all_factors)
    print(f"prepared {len(manifest.entries)} images at factors {list(cfg.all_factors)} -> {args.output}")
    return 0


def cmd_synth(args) -> int:
    _require(args, "output")
    if args.classes < 2 or args.per_class < 1:
        raise ConfigError("synth needs --classes >= 2 and --per-class >= 1")
    if args.size is None:
        args.size = 48
    cfg = _degrade_config(args, args.factors)
    out = Path(args.output)
    synth_corpus(args.per_class, args.classes, cfg, _get(args, "seed"), out / "base", args.test_per_class)
    manifest = prepare(out / "base", out, cfg, cfg.all_factors)
    print(f"synthesized {args.classes} classes, wrote {len(manifest.entries)} prepared images -> {out}")
    return 0


def _train_rrn(data_root, factors, params, seed, path):
    from .estimators import ResolutionRecognizer

    xs, _, rs = _load_views(data_root, factors)
    est = ResolutionRecognizer(random_state=_factor_seed(seed, 0), **params)
    est.fit(np.concatenate(xs), np.concatenate(rs))
    est.save(path, role="rrn", factors=list(factors))
    return est


def cmd_train_rrn(args) -> int:
    _require(args, "data", "output")
    factors = _training_factors(args, args.data)
    params = _net_params(args, args.data)
    path = Path(args.output) / "rrn.pt"
    path.parent.mkdir(parents=True, exist_ok=True)
    est = _train_rrn(args.data, factors, params, _get(args, "seed"), path)
    print(f"rrn over factors {list(factors)}: final loss {est.loss_curve_[-1] if est.loss_curve_ else float('nan'):.4f} -> {path}")
    return 0


def _train_expert(data_root, factor, params, seed, path, n_classes):
    from .estimators import ResNetClassifier

    X, y = load_split(data_root, "train", factor)
    est = ResNetClassifier(n_classes=n_classes, random_state=_factor_seed(seed, factor), **params).fit(X, y)
    est.save(path, role="expert", factor=int(factor))
    return str(path), (est.loss_curve_[-1] if est.loss_curve_ else float("nan"))


def _num_classes(data_root) -> int:
    from .degrade import DatasetManifest

    labels = {e[1] for e in DatasetManifest.read(data_root).entries}
    if not labels:
        raise DataError(f"{data_root}: empty manifest")
    return max(labels) + 1


def cmd_train_expert(args) -> int:
    _require(args, "data", "output")
    factors = _training_factors(args, args.data)
    wanted = tuple(args.factor) if args.factor else factors
    for f in wanted:
        if f not in factors:
            raise ConfigError(f"factor {f} is not among the training factors {list(factors)}")
    params = _net_params(args, args.data)
    seed = _get(args, "seed")
    n_classes = _num_classes(args.data)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    jobs = max(1, _get(args, "jobs"))
    tasks = [(args.data, f, params, seed, out / f"expert_x{f}.pt", n_classes) for f in wanted]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
            results = list(pool.map(_train_expert_star, tasks))
    else:
        results = [_train_expert(*t) for t in tasks]
    for f, (path, loss) in zip(wanted, results):
        print(f"expert x{f}: final loss {loss:.4f} -> {path}")
    return 0


def _train_expert_star(task):
    import torch

    torch.set_num_threads(1)
    return _train_expert(*task)


def cmd_train_baseline(args) -> int:
    _require(args, "method", "data", "output")
    if args.method not in TRAINED_BASELINES:
        if args.method in ("mean", "max"):
            raise ConfigError(f"{args.method} pools the trained experts; run train-expert, then eval --method {args.method}")
        raise ConfigError(f"{args.method} is not a baseline; use train-rrn and train-expert")
    from .baselines import DomainAdversarialClassifier, MultiScaleClassifier, ResolutionAwareBNClassifier

    factors = _training_factors(args, args.data)
    params = _net_params(args, args.data)
    n_classes = _num_classes(args.data)
    seed = _factor_seed(_get(args, "seed"), 1000 + TRAINED_BASELINES.index(args.method))
    xs, ys, rs = _load_views(args.data, factors)
    if args.method == "mstrain":
        if any(not np.array_equal(ys[0], y) for y in ys):
            raise DataError("training splits are not aligned across factors")
        est = MultiScaleClassifier(factors=factors, n_classes=n_classes, random_state=seed, **params)
        est.fit(np.stack(xs), ys[0])
    elif args.method == "rabn":
        est = ResolutionAwareBNClassifier(factors=factors, n_classes=n_classes, random_state=seed, **params)
        est.fit(np.concatenate(xs), np.concatenate(ys), np.concatenate(rs))
    else:
        est = DomainAdversarialClassifier(source_factor=args.source_factor, target_factor=args.target_factor,
                                          lam=args.lam, n_classes=n_classes, random_state=seed, **params)
        est.fit(np.concatenate(xs), np.concatenate(ys), np.concatenate(rs))
    path = Path(args.output) / f"baseline_{args.method}.pt"
    path.parent.mkdir(parents=True, exist_ok=True)
    est.save(path, role="baseline", method=args.method, factors=list(factors))
    print(f"{args.method}: final loss {est.loss_curve_[-1] if est.loss_curve_ else float('nan'):.4f} -> {path}")
    return 0


def _load_experts(ckpt_dir, factors):
    from .estimators import ResNetClassifier

    experts = []
    for f in factors:
        path = Path(ckpt_dir) / f"expert_x{f}.pt"
        if not path.is_file():
            raise FileNotFoundError(f"missing expert checkpoint {path}")
        experts.append(ResNetClassifier.load(path))
    return experts


def _load_drg(args, factors):
    from .estimators import DynamicResolutionClassifier, ResolutionRecognizer

    path = Path(args.checkpoints) / "rrn.pt"
    if not path.is_file():
        raise FileNotFoundError(f"missing recognizer checkpoint {path}")
    rrn = ResolutionRecognizer.load(path)
    if rrn.factors_ != tuple(factors):
        raise ConfigError(f"recognizer was trained on factors {list(rrn.factors_)}, expected {list(factors)}")
    experts = _load_experts(args.checkpoints, factors)
    return DynamicResolutionClassifier.from_parts(rrn, experts, routing=args.routing,
                                                  max_workers=max(1, _get(args, "jobs")))


def _write_drg_details(model, data_root, factors, out: Path, split: str):
    from .mrafer import write_predictions
    from .rrn import write_routes

    for f in factors:
        X, y = load_split(data_root, split, f)
        routes = model.predict_routes(X, factor=f)
        logits = model.decision_function(X, factor=f)
        if model.routing == "rrn":
            conf = model.recognizer_.predict_proba(X).max(axis=1)
        else:
            conf = np.ones(len(X))
        write_routes(out / f"routes_x{f}.csv", routes, conf)
        write_predictions(out / f"predictions_x{f}.csv", routes, model.trained_factors_,
                          model.classes_[logits.argmax(axis=1)], y)


def cmd_eval(args) -> int:
    _require(args, "method")
    train_factors = tuple(args.train_factors or _stored_factors(args.data))
    factors = tuple(args.factors or train_factors)
    if args.method == "drg":
        outside = [f for f in factors if f not in train_factors]
        if outside:
            raise ConfigError(
                f"drg can only be evaluated at its trained factors {list(train_factors)}; "
                f"{outside} would need an expert and a recognizer class that do not exist")
    _require(args, "data", "checkpoints", "output")
    if args.method == "expert" and args.expert is None:
        raise ConfigError("eval --method expert needs --expert FACTOR")
    out = Path(args.output)
    method = args.method
    if method == "drg":
        model = _load_drg(args, train_factors)
        if args.routing == "oracle":
            method = "drg-oracle"
        report = eval_grid(model, args.data, factors, method=method, split=args.split)
        if args.cross_factors:
            experts = {f"x{f}": e for f, e in zip(train_factors, model.experts_)}
            report.cross_matrix = eval_cross(experts, args.data, args.cross_factors, split=args.split)
        _write_drg_details(model, args.data, factors, out, args.split)
    elif method in ("mean", "max"):
        from .baselines import PooledExpertClassifier

        model = PooledExpertClassifier(_load_experts(args.checkpoints, train_factors), method)
        report = eval_grid(model, args.data, factors, method=method, split=args.split,
                           trained_factors=train_factors)
    elif method == "expert":
        (model,) = _load_experts(args.checkpoints, (args.expert,))
        method = f"expert_x{args.expert}"
        report = eval_grid(model, args.data, factors, method=method, split=args.split,
                           trained_factors=train_factors)
    else:
        from .baselines import DomainAdversarialClassifier, MultiScaleClassifier, ResolutionAwareBNClassifier

        cls = {"rabn": ResolutionAwareBNClassifier, "da": DomainAdversarialClassifier,
               "mstrain": MultiScaleClassifier}[method]
        path = Path(args.checkpoints) / f"baseline_{method}.pt"
        if not path.is_file():
            raise FileNotFoundError(f"missing baseline checkpoint {path}")
        model = cls.load(path)
        if method == "rabn":
            outside = [f for f in factors if f not in model.factors]
            if outside:
                raise ConfigError(f"rabn has normalization branches only for {list(model.factors)}, not {outside}")
        report = eval_grid(model, args.data, factors, method=method, split=args.split,
                           trained_factors=train_factors)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / f"eval_{method}.json", report_to_dict(report))
    cells = ", ".join(f"x{f}={report.per_factor_accuracy[f]:.4f}" for f in factors)
    print(f"{DISPLAY_NAMES.get(method, method)}: {cells}")
    if report.route_accuracy is not None:
        print(f"route accuracy {report.route_accuracy:.4f}")
    return 0


def _report_key(r: EvalReport):
    try:
        return (0, REPORT_ORDER.index(r.method), r.method)
    except ValueError:
        return (1, 0, r.method)


def cmd_report(args) -> int:
    _require(args, "evals", "output")
    files = []
    for entry in args.evals:
        p = Path(entry)
        files.extend(sorted(p.glob("eval_*.json")) if p.is_dir() else [p])
    if not files:
        raise DataError(f"no eval_*.json files under {args.evals}")
    reports = []
    for f in files:
        try:
            with open(f) as fh:
                reports.append(report_from_dict(json.load(fh)))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{f}: not an evaluation file ({exc})") from None
    reports.sort(key=_report_key)
    written = write_report(reports, args.output, tuple(args.format or ("csv", "md")))
    for path in written:
        print(path)
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    return 0 if run_selftest(seed=_get(args, "seed")) else 1


COMMANDS = {
    "prepare": cmd_prepare,
    "synth": cmd_synth,
    "train-rrn": cmd_train_rrn,
    "train-expert": cmd_train_expert,
    "train-baseline": cmd_train_baseline,
    "eval": cmd_eval,
    "report": cmd_report,
    "selftest": cmd_selftest,
}


def run(argv=None) -> int:
    """Parse ``argv``, dispatch, and map failures onto exit codes."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
        if args.verb is None:
            parser.print_usage(sys.stderr)
            return 2
        args = _merge_config(args)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.verb](args)
    except SystemExit as exc:  # --help
        return int(exc.code or 0) if not isinstance(exc.code, str) else 2
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
