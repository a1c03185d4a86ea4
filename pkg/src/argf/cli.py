"""Command-line entry point: ``argf <subcommand> ...``.

Exit codes: 0 success, 1 training diverged or a check failed, 2 invalid
input (bad config, bad bundle, bad arguments).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

from .data import BundleError, SyntheticSpec, generate_synthetic, load_bundle, save_bundle
from .harness import (
    ArgfModel,
    RunConfig,
    TrainingDiverged,
    ablate,
    compare,
    evaluate,
    export_embeddings,
    export_graph_weights,
    format_table,
    grid_search,
    train,
)

log = logging.getLogger("argf")

EXIT_FAILED = 1
EXIT_INVALID = 2


class InvalidInput(Exception):
    pass


def _add_config_flags(p):
    p.add_argument("--config", type=Path, help="JSON file with RunConfig keys")
    group = p.add_argument_group("config overrides (same names as the config keys)")
    for f in fields(RunConfig):
        flags = [f"--{f.name}"] + ([f"--{f.name.replace('_', '-')}"] if "_" in f.name else [])
        if f.type in ("bool", bool):
            group.add_argument(*flags, dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        else:
            kind = {"int": int, "float": float, "str": str}[f.type if isinstance(f.type, str) else f.type.__name__]
            group.add_argument(*flags, dest=f.name, type=kind, default=None)


def _config(args):
    try:
        base = RunConfig.load(args.config) if args.config else RunConfig()
        overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig) if getattr(args, f.name) is not None}
        return replace(base, **overrides)
    except (OSError, json.JSONDecodeError, ValueError, TypeError) as exc:
        raise InvalidInput(f"bad config: {exc}") from None


def _bundle(args):
    try:
        return load_bundle(args.data, seed=args.split_seed)
    except BundleError as exc:
        raise InvalidInput(str(exc)) from None


def _load_model(path):
    try:
        return ArgfModel.load(path)
    except (OSError, KeyError, ValueError) as exc:
        raise InvalidInput(f"cannot load model {path}: {exc}") from None


def _write(path, text):
    if path is not None:
        Path(path).write_text(text)
        log.info("wrote %s", path)


def _reports_json(rows):
    return json.dumps({name: r.to_dict() for name, r in rows.items()}, indent=2, sort_keys=True) + "\n"


# -- subcommands -------------------------------------------------------------------


def cmd_synth(args):
    try:
        spec = SyntheticSpec(
            num_classes=args.num_classes, dim=args.dim, separation=args.separation,
            noise=tuple(args.noise), redundancy=args.redundancy, count=args.count, seed=args.seed,
        )
    except ValueError as exc:
        raise InvalidInput(str(exc)) from None
    save_bundle(generate_synthetic(spec), args.out)
    print(f"wrote {spec.count} samples to {args.out}")
    return 0


def cmd_train(args):
    config, bundle = _config(args), _bundle(args)

    def progress(epoch, _model, entry):
        log.info("epoch %d mse %.4f val %.4f", epoch, entry["mse"], entry["val_accuracy"] or float("nan"))

    try:
        model, report = train(config, bundle, on_epoch=progress)
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        if args.model:
            exc.model.save(args.model)
        _write(args.report, exc.report.to_json(args.timing))
        return EXIT_FAILED
    if args.model:
        model.save(args.model)
    _write(args.report, report.to_json(args.timing))
    print(format_table({"train": report}, "run"))
    return 0


def cmd_eval(args):
    model, bundle = _load_model(args.model), _bundle(args)
    if (bundle.dim, bundle.num_classes) != (model.dim, model.num_classes):
        raise InvalidInput(
            f"model expects dim={model.dim}, classes={model.num_classes}; "
            f"bundle has dim={bundle.dim}, classes={bundle.num_classes}"
        )
    report = evaluate(model, bundle, args.split)
    _write(args.report, report.to_json())
    m = report.test
    print(f"{args.split}: n={m.count} accuracy={m.accuracy:.4f} avg_f1={m.avg_f1:.4f}")
    return 0


def cmd_gridsearch(args):
    base, bundle = _config(args), _bundle(args)
    try:
        grid = json.loads(Path(args.grid).read_text())
        if not isinstance(grid, dict) or not all(isinstance(v, list) and v for v in grid.values()):
            raise ValueError("grid must map config keys to non-empty lists")
        ranked = grid_search(base, grid, bundle, workers=args.workers)
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_FAILED
    except (OSError, json.JSONDecodeError, ValueError, TypeError) as exc:
        raise InvalidInput(f"bad grid: {exc}") from None
    keys = sorted(grid)
    rows = {", ".join(f"{k}={getattr(c, k)}" for k in keys): r for c, r in ranked}
    _write(args.report, json.dumps([r.to_dict() for _, r in ranked], indent=2, sort_keys=True) + "\n")
    print(format_table(rows, "grid search (best first)"))
    return 0


def _rows_command(fn, title):
    def run(args):
        config, bundle = _config(args), _bundle(args)
        try:
            rows = fn(config, bundle)
        except TrainingDiverged as exc:
            print(f"training diverged: {exc}", file=sys.stderr)
            return EXIT_FAILED
        _write(args.report, _reports_json(rows))
        print(format_table(rows, title))
        return 0

    return run


def cmd_gradcheck(args):
    from .gradcheck_suite import TOLERANCE, run_all

    results, seconds = run_all(args.seed)
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{r.name:<{width}}  {r.max_rel_error:.2e}  {'ok' if r.passed else 'FAIL'}")
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} below {TOLERANCE:g} in {seconds:.1f}s")
    return EXIT_FAILED if failed else 0


def cmd_export_embeddings(args):
    model, bundle = _load_model(args.model), _bundle(args)
    values, _ = export_embeddings(model, bundle, args.out, split=args.split)
    print(f"wrote {len(values)} rows to {args.out}")
    return 0


def cmd_export_graph(args):
    model, bundle = _load_model(args.model), _bundle(args)
    try:
        weights = export_graph_weights(model, bundle, args.out, split=args.split)
    except TypeError as exc:
        raise InvalidInput(str(exc)) from None
    print(f"wrote {len(weights)} rows to {args.out}")
    return 0


# -- parser ------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="argf", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def data_cmd(name, help, config=True):
        p = sub.add_parser(name, help=help)
        p.add_argument("--data", type=Path, required=True, help="bundle directory")
        p.add_argument("--split-seed", type=int, default=0, help="seed for the default split if splits.csv is absent")
        if config:
            _add_config_flags(p)
        return p

    p = sub.add_parser("synth", help="write a synthetic bundle")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--num-classes", type=int, default=2)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--separation", type=float, default=1.25)
    p.add_argument("--noise", type=float, nargs=3, default=(1.0, 1.0, 1.0), metavar=("A", "V", "L"))
    p.add_argument("--redundancy", type=float, default=0.5)
    p.add_argument("--count", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_synth)

    p = data_cmd("train", "train one configuration")
    p.add_argument("--report", type=Path)
    p.add_argument("--model", type=Path, help="save the best checkpoint (.npz)")
    p.add_argument("--timing", action="store_true", help="include wall-clock time in the report")
    p.set_defaults(fn=cmd_train)

    p = data_cmd("eval", "evaluate a saved model", config=False)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test", "all"))
    p.add_argument("--report", type=Path)
    p.set_defaults(fn=cmd_eval)

    p = data_cmd("gridsearch", "train every point of a config grid")
    p.add_argument("--grid", type=Path, required=True, help='JSON such as {"lam": [0.3, 0.7], "k": [8, 16]}')
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--report", type=Path)
    p.set_defaults(fn=cmd_gridsearch)

    p = data_cmd("ablate", "full model plus the three single-mechanism ablations")
    p.add_argument("--report", type=Path)
    p.set_defaults(fn=_rows_command(ablate, "ablation"))

    p = data_cmd("compare", "every fusion strategy on the same embedding stage")
    p.add_argument("--report", type=Path)
    p.set_defaults(fn=_rows_command(compare, "fusion comparison"))

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gradcheck)

    for name, fn, default_split in (
        ("export-embeddings", cmd_export_embeddings, "all"),
        ("export-graph", cmd_export_graph, "test"),
    ):
        p = data_cmd(name, f"write per-sample {name.split('-')[1]} rows as CSV", config=False)
        p.add_argument("--model", type=Path, required=True)
        p.add_argument("--out", type=Path, required=True)
        p.add_argument("--split", default=default_split, choices=("train", "val", "test", "all"))
        p.set_defaults(fn=fn)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except InvalidInput as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
