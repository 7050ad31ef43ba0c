"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime error.  Diagnostics go to
stderr; results go to files in the output directory, together with a
``manifest.json`` recording configs and content hashes.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

from . import __version__
from .checkpoint import MODEL_KINDS, CorruptCheckpoint, ConfigHashMismatch, build_model, load_checkpoint
from .data import (Dataset, ParseError, ValidationError, instance_from_dict, load_dataset,
                   load_schema, save_dataset, save_schema, split_dataset)
from .evaluation import (SLICE_DIMENSIONS, EmptyAnchor, Splits, run_ablation, slice_analysis, write_metrics)
from .features import EncoderConfig
from .metrics import DegenerateLabels, auc, classification_metrics
from .model import ABLATIONS, RmiaConfig
from .service import Scorer, serve
from .synth import OracleParams, WorldConfig, generate_labeled, generate_world
from .train import NonFiniteLoss, TrainConfig, grid_search, train

log = logging.getLogger("rmia")

RUNTIME_ERRORS = (OSError, ValueError, KeyError, ParseError, ValidationError, CorruptCheckpoint, ConfigHashMismatch,
                  NonFiniteLoss, DegenerateLabels, EmptyAnchor)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# -- helpers ----------------------------------------------------------------------

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _read_json(path) -> dict:
    if path is None:
        return {}
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    if not isinstance(obj, dict):
        raise ValueError(f"{path}: expected a JSON object")
    return obj


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_manifest(out: Path, args, configs: dict, inputs=()) -> None:
    """Configs plus content hashes of every input and output file."""
    outputs = {p.relative_to(out).as_posix(): _sha256(p)
               for p in sorted(out.rglob("*")) if p.is_file() and p.name != "manifest.json"}
    manifest = {
        "tool": "rmia",
        "version": __version__,
        "command": args.command,
        "argv": sys.argv[1:],
        "seed": getattr(args, "seed", None),
        "configs": configs,
        "inputs": {str(p): _sha256(Path(p)) for p in inputs if Path(p).is_file()},
        "outputs": outputs,
        "created_unix": time.time(),
    }
    _write_json(out / "manifest.json", manifest)


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_splits(data_dir: Path) -> tuple[Splits, object]:
    schema = load_schema(data_dir / "schema.json")
    parts = [load_dataset(data_dir / f"{name}.jsonl", schema) for name in ("train", "val", "test")]
    return Splits(*parts), schema


def _model_config(kind: str, path) -> dict:
    cfg = _read_json(path)
    cls = MODEL_KINDS[kind][1]
    return cls.from_dict(cfg).to_dict()


def _train_config(args) -> TrainConfig:
    cfg = TrainConfig.from_dict(_read_json(args.train_config))
    overrides = {k: v for k, v in (("seed", args.seed), ("lr", args.lr), ("weight_decay", args.weight_decay),
                                   ("epochs", args.epochs), ("batch_size", args.batch_size)) if v is not None}
    return replace(cfg, **overrides)


# -- subcommands --------------------------------------------------------------------

def cmd_gen_data(args) -> None:
    cfg = _read_json(args.config)
    world_cfg = WorldConfig(**cfg.get("world", {}))
    oracle = OracleParams(**cfg.get("oracle", {}))
    n = args.n if args.n is not None else int(cfg.get("n", 20000))
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    balanced = bool(cfg.get("balanced", True)) if args.balanced is None else args.balanced
    ratios = tuple(cfg.get("split", (0.8, 0.1, 0.1)))
    out = _out_dir(args.out)

    world = generate_world(world_cfg, seed)
    ds, truth = generate_labeled(world, oracle, n, seed, balanced=balanced)
    train_ds, val_ds, test_ds = split_dataset(ds, ratios, seed)
    save_dataset(ds, out / "data.jsonl")
    for name, part in (("train", train_ds), ("val", val_ds), ("test", test_ds)):
        save_dataset(part, out / f"{name}.jsonl")
    save_schema(world.schema(), out / "schema.json")
    position = {id(inst): i for i, inst in enumerate(ds.instances)}
    test_idx = [position[id(inst)] for inst in test_ds.instances]
    labels = ds.labels()
    truth_doc = {
        "oracle": asdict(oracle),
        "world": asdict(world_cfg),
        "seed": seed,
        "n": n,
        "balanced": balanced,
        "pass_rate": float(labels.mean()),
        "bayes_auc": auc(truth.probability, labels),
        "bayes_auc_test": auc(truth.probability[test_idx], labels[test_idx]),
        "bayes_auc_without_ternary": auc(truth.probability_without_ternary, labels),
    }
    _write_json(out / "ground_truth.json", truth_doc)
    write_manifest(out, args, {"world": asdict(world_cfg), "oracle": asdict(oracle), "n": n, "balanced": balanced,
                               "split": list(ratios)}, [args.config] if args.config else ())
    log.info("wrote %d instances to %s (bayes auc %.4f)", n, out, truth_doc["bayes_auc"])


def cmd_train(args) -> None:
    data_dir = Path(args.data)
    splits, schema = _load_splits(data_dir)
    tcfg = _train_config(args)
    mcfg = _model_config(args.kind, args.model_config)
    model = build_model(args.kind, mcfg, schema, EncoderConfig.from_dict(_read_json(args.encoder_config)))
    out = _out_dir(args.out)
    btr, bva = model.encode(splits.train.instances), model.encode(splits.val.instances)
    store, report = train(model, btr, bva, tcfg, checkpoint_path=out / "model.ckpt", log=log.info)
    report.checkpoint_path = "model.ckpt"
    report.write(out)
    write_manifest(out, args, {"kind": args.kind, "model": mcfg, "train": tcfg.to_dict(),
                               "config_hash": model.config_hash()},
                   [data_dir / f"{n}.jsonl" for n in ("train", "val")] + [data_dir / "schema.json"])


def cmd_grid_search(args) -> None:
    data_dir = Path(args.data)
    splits, schema = _load_splits(data_dir)
    tcfg = _train_config(args)
    mcfg = _model_config(args.kind, args.model_config)
    model = build_model(args.kind, mcfg, schema, EncoderConfig.from_dict(_read_json(args.encoder_config)))
    out = _out_dir(args.out)
    btr, bva = model.encode(splits.train.instances), model.encode(splits.val.instances)
    result = grid_search(model, btr, bva, tcfg, log=log.info)
    (out / "grid.csv").write_text(result.runs_csv())
    _write_json(out / "best.json", {"lr": result.best_lr, "l2": result.best_l2, "best_val_auc": result.best_val_auc,
                                    "n_runs": result.n_runs})
    _, report = train(model, btr, bva, tcfg, lr=result.best_lr, weight_decay=result.best_l2,
                      checkpoint_path=out / "model.ckpt")
    report.checkpoint_path = "model.ckpt"
    report.write(out)
    write_manifest(out, args, {"kind": args.kind, "model": mcfg, "train": tcfg.to_dict()},
                   [data_dir / f"{n}.jsonl" for n in ("train", "val")])


def _dataset_arg(args, schema) -> tuple[Path, Dataset]:
    path = Path(args.data)
    if path.is_dir():
        path = path / "test.jsonl"
    return path, load_dataset(path, schema)


def cmd_evaluate(args) -> None:
    model, store, _ = load_checkpoint(args.checkpoint)
    path, ds = _dataset_arg(args, model.schema)
    batch = model.encode(ds.instances)
    scores = model.predict_proba(store, batch)
    report = classification_metrics(scores, batch.labels, args.threshold)
    out = _out_dir(args.out)
    write_metrics(report, out)
    with open(out / "predictions.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("index,label,prob_pass\n")
        for i, (y, p) in enumerate(zip(batch.labels, scores)):
            fh.write(f"{i},{int(y)},{float(p)!r}\n")
    write_manifest(out, args, {"threshold": args.threshold, "config_hash": model.config_hash()},
                   [args.checkpoint, path])
    log.info("auc=%.4f f1=%.4f n=%d", report.auc, report.f1, report.n)


def cmd_ablate(args) -> None:
    data_dirs = [Path(d) for d in args.data]
    seeds = args.seeds if args.seeds else list(range(len(data_dirs)))
    if len(data_dirs) not in (1, len(seeds)):
        raise UsageError("pass one data directory, or one per seed")
    splits_by_seed, schema = {}, None
    for i, seed in enumerate(seeds):
        splits, schema = _load_splits(data_dirs[i if len(data_dirs) > 1 else 0])
        splits_by_seed[seed] = splits
    variants = args.variants if args.variants is not None else list(ABLATIONS)
    tcfg = _train_config(args)
    mcfg = RmiaConfig.from_dict(_model_config("rmia", args.model_config))
    out = _out_dir(args.out)
    table = run_ablation(splits_by_seed, schema, mcfg, tcfg, variants, experiment=args.experiment, out_dir=out,
                         log=log.info)
    write_manifest(out, args, {"model": mcfg.to_dict(), "train": tcfg.to_dict(), "variants": list(variants),
                               "seeds": list(seeds)},
                   [d / f"{n}.jsonl" for d in data_dirs for n in ("train", "val", "test")])
    for v, m in table.summary()["mean_auc"].items():
        log.info("%s: mean auc %.4f", v, m)


def cmd_analyze(args) -> None:
    path = Path(args.data)
    schema_path = Path(args.schema) if args.schema else (path if path.is_dir() else path.parent) / "schema.json"
    schema = load_schema(schema_path)
    if path.is_dir():
        path = path / "data.jsonl"
    ds = load_dataset(path, schema)
    if args.checkpoint:
        model, store, _ = load_checkpoint(args.checkpoint)
        values = model.predict_proba(store, model.encode(ds.instances))
        source = "predictions"
    else:
        values = ds.labels()
        source = "labels"
    out = _out_dir(args.out)
    dims = args.dimension or list(SLICE_DIMENSIONS)
    anchors = dict(a.split("=", 1) for a in args.anchor) if args.anchor else {}
    for dim in dims:
        anchor = anchors.get(dim, SLICE_DIMENSIONS[dim][1][0])
        report = slice_analysis(values, ds.instances, dim, anchor)
        (out / f"slice_{dim}.csv").write_text(report.to_csv())
    write_manifest(out, args, {"source": source, "dimensions": dims, "anchors": anchors},
                   [path] + ([args.checkpoint] if args.checkpoint else []))


def cmd_score(args) -> None:
    scorer = Scorer.from_checkpoint(args.checkpoint, args.threshold)
    src = Path(args.input)
    out_path = Path(args.output)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(src, encoding="utf-8") as fin, open(out_path, "w", encoding="utf-8", newline="\n") as fout:
        for lineno, raw in enumerate(fin, start=1):
            if not raw.strip():
                continue
            try:
                inst = instance_from_dict(json.loads(raw))
                scorer.validate(inst)
            except json.JSONDecodeError as exc:
                raise ParseError(lineno, str(exc)) from None
            except ValidationError as exc:
                raise ValidationError(exc.field, exc.reason, line=lineno) from None
            fout.write(json.dumps(scorer.score(inst)) + "\n")


def cmd_serve(args) -> None:
    server = serve(args.checkpoint, args.host, args.port, args.threshold)
    host, port = server.server_address[:2]
    log.warning("serving %s on http://%s:%d (model %s)", args.checkpoint, host, port, server.scorer.model_hash[:12])
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()


# -- parser ---------------------------------------------------------------------------

def _add_train_flags(p) -> None:
    p.add_argument("--model-config", help="model config JSON")
    p.add_argument("--encoder-config", help="encoder config JSON")
    p.add_argument("--train-config", help="train config JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rmia", description="Relation-aware approval model: data, training, evaluation, serving.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("--version", action="version", version=f"rmia {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-data", help="generate a synthetic world and labeled splits")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON with world/oracle/n/balanced/split/seed")
    p.add_argument("--seed", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--balanced", action=argparse.BooleanOptionalAction, default=None)
    p.set_defaults(func=cmd_gen_data)

    for name, func, helptext in (("train", cmd_train, "train one model"),
                                 ("grid-search", cmd_grid_search, "search lr x l2, then train the best")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--data", required=True, help="directory written by gen-data")
        p.add_argument("--out", required=True)
        p.add_argument("--kind", choices=sorted(MODEL_KINDS), default="rmia")
        _add_train_flags(p)
        p.set_defaults(func=func)

    p = sub.add_parser("evaluate", help="metrics of a checkpoint on a labeled dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="JSONL file, or a gen-data directory (uses test.jsonl)")
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="full model vs single-component ablations over seeds")
    p.add_argument("--data", required=True, nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--variants", nargs="*", choices=sorted(ABLATIONS))
    p.add_argument("--experiment", default="ablation")
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("analyze", help="approval-rate slices by category")
    p.add_argument("--data", required=True, help="JSONL file or gen-data directory (uses data.jsonl)")
    p.add_argument("--schema")
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", help="slice predicted probabilities instead of labels")
    p.add_argument("--dimension", action="append", choices=sorted(SLICE_DIMENSIONS))
    p.add_argument("--anchor", action="append", metavar="DIM=CATEGORY")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("score", help="score a JSONL of instances")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("serve", help="HTTP scoring endpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), stream=sys.stderr,
                        format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"rmia: error: {exc}", file=sys.stderr)
        return 1
    except RUNTIME_ERRORS as exc:
        print(f"rmia {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
