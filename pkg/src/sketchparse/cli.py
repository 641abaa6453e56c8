"""Command-line entry point: sketch, train, predict, eval, exec-sql, gradcheck."""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
import tempfile
from dataclasses import asdict

from .config import TrainConfig, load_config, parse_config_text
from .data import TASKS, load_dataset, task_kind
from .errors import SketchParseError
from .evaluation import EvalReport, evaluate, execute_sql, load_tables
from .meaning import SqlQuery, parse_sql
from .sketch import LAMBDA, SQL, extract

log = logging.getLogger("sketchparse")


class UsageError(Exception):
    pass


def _write_atomic(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _open_out(path: str | None):
    if path in (None, "-"):
        return contextlib.nullcontext(sys.stdout)
    return open(path, "w", encoding="utf-8")


def _lines(path: str | None):
    f = sys.stdin if path in (None, "-") else open(path, encoding="utf-8")
    try:
        for line in f:
            if line.strip():
                yield line.rstrip("\n")
    finally:
        if f is not sys.stdin:
            f.close()


def _tables(path: str | None):
    return load_tables(path) if path else None


# -- sketch -------------------------------------------------------------------

def cmd_sketch(args) -> int:
    """One meaning representation per line (whitespace tokens; SQL as a JSON
    record) to its sketch."""
    kind = task_kind(args.kind)
    with _open_out(args.output) as out:
        for line in _lines(args.input):
            y = json.loads(line) if kind == SQL else line if kind == LAMBDA else line.split()
            if kind == SQL and "sql" in y:
                y = y["sql"]
            out.write(str(extract(y, kind)) + "\n")
    return 0


# -- train ----------------------------------------------------------------------

def build_config(args) -> TrainConfig:
    values = load_config(args.config) if args.config else {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        values.update(parse_config_text(item))
    values["kind"] = task_kind(args.kind)
    if args.seed is not None:
        values["seed"] = args.seed
    if args.onestage:
        values["onestage"] = True
    if args.no_sketch_encoder:
        values["sketch_encoder"] = False
    if args.no_table_aware:
        values["table_aware"] = False
    return TrainConfig.from_dict(values).resolved()


def _prediction_record(pred) -> dict:
    if isinstance(pred.y, SqlQuery):
        y = {"sql": pred.y.to_record()}
    else:
        y = {"mr": list(pred.y) if pred.y is not None else None}
    return {**y, "sketch": list(pred.sketch.tokens), "logp": pred.logp,
            "logp_sketch": pred.logp_sketch, "logp_fine": pred.logp_fine}


def cmd_train(args) -> int:
    from .train import infer, save_model, train

    cfg = build_config(args)
    tables = _tables(args.tables)
    train_set = load_dataset(args.train, cfg.kind, tables)
    dev_set = load_dataset(args.dev, cfg.kind, tables) if args.dev else None
    result = train(train_set, dev_set, cfg,
                   on_epoch=lambda r: print(f"epoch {r.epoch} loss {r.train_loss:.4f} "
                                            f"dev_exact_match {r.dev_acc:.4f}", flush=True))
    save_model(args.checkpoint, result.model, result.optimizer)
    outputs = [_prediction_record(p) for p in infer(dev_set or train_set, result.model)]
    manifest = {
        "config": cfg.to_dict(), "seed": cfg.seed,
        "datasets": {"train": args.train, "dev": args.dev, "tables": args.tables},
        "checkpoint": os.path.abspath(args.checkpoint),
        "history": [asdict(r) for r in result.history],
        "best_epoch": result.best_epoch, "best_dev_exact_match": result.best_dev,
        "skipped_examples": result.skipped,
        "outputs": outputs,
    }
    _write_atomic(args.manifest or args.checkpoint + ".manifest.json", json.dumps(manifest, indent=1) + "\n")
    print(f"best epoch {result.best_epoch} dev_exact_match {result.best_dev:.4f}; "
          f"checkpoint {args.checkpoint}")
    return 0


# -- predict ----------------------------------------------------------------------

def cmd_predict(args) -> int:
    from .train import infer, load_model

    model = load_model(args.checkpoint)
    data = load_dataset(args.data, model.kind, _tables(args.tables))
    preds = infer(data, model, oracle=args.oracle_sketch)
    with _open_out(args.output) as out:
        for p in preds:
            out.write(json.dumps(_prediction_record(p)) + "\n")
    return 0


# -- eval ---------------------------------------------------------------------------

def read_predictions(path: str, kind: str) -> list:
    preds = []
    for lineno, line in enumerate(_lines(path), start=1):
        try:
            rec = json.loads(line)
            if kind == SQL:
                preds.append(SqlQuery.from_record(rec["sql"]) if rec.get("sql") else None)
            else:
                mr = rec.get("mr")
                preds.append(tuple(mr.split() if isinstance(mr, str) else mr) if mr else None)
        except (json.JSONDecodeError, KeyError, TypeError, ValueError, SketchParseError) as exc:
            raise SketchParseError(f"{path}:{lineno}: bad prediction record: {exc}") from exc
    return preds


def cmd_eval(args) -> int:
    kind = task_kind(args.kind)
    tables = _tables(args.tables)
    gold = load_dataset(args.gold, kind, tables)
    preds = read_predictions(args.pred, kind)
    instances = None
    if kind == SQL and tables is not None:
        missing = [ex.table_id for ex in gold if ex.table_id not in tables]
        if missing:
            raise SketchParseError(f"no table rows for {missing[0]!r}")
        instances = [tables[ex.table_id] for ex in gold]
    report = evaluate(preds, [ex.y for ex in gold], [ex.sketch for ex in gold], kind, instances,
                      label=args.label or "")
    print(report.summary())
    print(json.dumps(report.to_record()))
    if args.report:
        with open(args.report, "w", encoding="utf-8") as f:
            f.write(json.dumps(report.to_record()) + "\n")
            for v in report.verdicts:
                f.write(json.dumps(v) + "\n")
    return 0


def report_for(preds, examples, kind, tables=None, label="") -> EvalReport:
    """EvalReport for in-memory predictions against their examples."""
    instances = [tables[ex.table_id] for ex in examples] if tables else None
    return evaluate([p.y for p in preds], [ex.y for ex in examples],
                    [ex.sketch for ex in examples], kind, instances, label)


# -- exec-sql --------------------------------------------------------------------

def _jsonable(v):
    return str(v) if not isinstance(v, (int, float, str)) else v


def cmd_exec_sql(args) -> int:
    tables = load_tables(args.tables)
    if args.table_id not in tables:
        raise UsageError(f"unknown table {args.table_id!r}")
    table = tables[args.table_id]
    text = args.query.strip()
    q = SqlQuery.from_record(json.loads(text)) if text.startswith("{") else parse_sql(text, table.schema)
    print(json.dumps([_jsonable(v) for v in execute_sql(q, table)]))
    return 0


# -- gradcheck ----------------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    from .checks import TOLERANCE, loss_errors, operation_errors

    worst: dict[str, float] = {}
    for seed in range(args.seeds):
        for fam, err in operation_errors(seed).items():
            worst[f"op {fam}"] = max(worst.get(f"op {fam}", 0.0), err)
        if not args.ops_only:
            for fam, err in loss_errors(seed).items():
                worst[f"loss {fam}"] = max(worst.get(f"loss {fam}", 0.0), err)
    ok = True
    for fam, err in worst.items():
        good = err < TOLERANCE
        ok &= good
        print(f"{fam:32s} {err:.3e} {'ok' if good else 'FAIL'}")
    return 0 if ok else 1


# -- wiring -------------------------------------------------------------------------

def _kind_arg(p, required=True):
    p.add_argument("--kind", required=required, choices=sorted(TASKS),
                   help="geo|atis (lambda), django (code), wikisql (sql)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sketchparse", description="Coarse-to-fine semantic parsing.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sketch", help="print the sketch of each meaning representation")
    _kind_arg(p)
    p.add_argument("--input", default="-")
    p.add_argument("--output", default="-")
    p.set_defaults(func=cmd_sketch)

    p = sub.add_parser("train", help="train a parser and write a checkpoint and run manifest")
    _kind_arg(p)
    p.add_argument("--train", required=True)
    p.add_argument("--dev")
    p.add_argument("--tables")
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config value")
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest")
    p.add_argument("--onestage", action="store_true")
    p.add_argument("--no-sketch-encoder", action="store_true")
    p.add_argument("--no-table-aware", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="decode a dataset with a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--tables")
    p.add_argument("--oracle-sketch", action="store_true")
    p.add_argument("--output", default="-")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="score predictions against gold")
    _kind_arg(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--gold", required=True)
    p.add_argument("--tables")
    p.add_argument("--label")
    p.add_argument("--report", help="also write the report and per-example verdicts as JSON lines")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("exec-sql", help="run one query against a table")
    p.add_argument("--tables", required=True)
    p.add_argument("--table-id", required=True)
    p.add_argument("--query", required=True, help="SELECT text or a JSON sel/agg/conds record")
    p.set_defaults(func=cmd_exec_sql)

    p = sub.add_parser("gradcheck", help="finite-difference check of every gradient")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--ops-only", action="store_true")
    p.set_defaults(func=cmd_gradcheck)
    return ap


def run(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        ap.print_usage(sys.stderr)
        print(f"sketchparse: error: {exc}", file=sys.stderr)
        return 2
    except (SketchParseError, ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"sketchparse: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
