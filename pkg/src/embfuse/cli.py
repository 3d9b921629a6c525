"""Command-line entry point.

Eight subcommands cover the pipeline from raw files to charts: inspect,
prepare, fuse, lr-find, train, sweep, eval, report. Every flag can also be
supplied through a JSON config file (--config); explicit flags win. All
failures print one ``ERROR <code>: <message>`` line to stderr and exit 1
for bad invocations or input validation, 2 for runtime failures.
"""
from __future__ import annotations

import argparse
import json
import os
import re
import sys
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import charts, corpus, fusion, model, optim
from .embedding_io import FORMATS, parse_embedding, write_word2vec_binary
from .errors import EmbfuseError, ValidationError


class UsageError(ValidationError):
    code = "usage"


class UnknownCommandError(ValidationError):
    code = "unknown-command"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


@dataclass
class _Opt:
    dest: str
    flags: Tuple[str, ...]
    type: Callable[[str], Any] = str
    default: Any = None
    help: str = ""
    required: bool = False
    is_flag: bool = False
    choices: Optional[Tuple[str, ...]] = None
    positional: bool = False


_MODEL_OPTS = [
    _Opt("lstm_units", ("--lstm-units",), int, 512, "units per LSTM direction"),
    _Opt("gru_units", ("--gru-units",), int, 256, "units per GRU direction"),
    _Opt("spatial_dropout", ("--spatial-dropout",), float, 0.2, "embedding channel dropout rate"),
    _Opt("dropout", ("--dropout",), float, 0.3, "dropout rate after each recurrent layer"),
]

_TRAIN_COMMON = [
    _Opt("dataset", ("--dataset",), str, help="prepared dataset file", required=True),
    _Opt("fused", ("--fused",), str, help="fused embedding file (binary)", required=True),
    _Opt("batch", ("--batch",), int, 32, "mini-batch size"),
    _Opt("seed", ("--seed",), int, 7, "seed for init, shuffling and dropout"),
]

_COMMAND_OPTS: Dict[str, List[_Opt]] = {
    "inspect": [
        _Opt("file", ("file",), str, help="embedding file to inspect", required=True,
             positional=True),
        _Opt("format", ("--format",), str, help="file format", required=True,
             choices=FORMATS),
    ],
    "prepare": [
        _Opt("csv", ("--csv",), str, help="review CSV to ingest", required=True),
        _Opt("out", ("--out",), str, help="dataset file to write", required=True),
        _Opt("seed", ("--seed",), int, 0, "seed for the train/test split"),
        _Opt("buckets", ("--buckets",), str, "1-2/3/4-5", "star buckets as bad/neutral/good"),
        _Opt("no_title", ("--no-title",), help="ignore the review title column", is_flag=True),
        _Opt("max_len", ("--max-len",), int, 60, "encoded sequence length"),
        _Opt("train_fraction", ("--train-fraction",), float, 0.9, "share of examples in train"),
        _Opt("lemma_table", ("--lemma-table",), str, help="token<TAB>lemma file replacing the built-in lemmatizer"),
    ],
    "fuse": [
        _Opt("emb1", ("--emb1",), str, help="first table as PATH:FORMAT", required=True),
        _Opt("emb2", ("--emb2",), str, help="second table as PATH:FORMAT", required=True),
        _Opt("dataset", ("--dataset",), str, help="prepared dataset file", required=True),
        _Opt("out", ("--out",), str, help="fused embedding file to write", required=True),
        _Opt("report", ("--report",), str, help="branch-count CSV to write"),
        _Opt("unknown_fill", ("--unknown-fill",), float, 0.0, "value for rows of unknown words"),
        _Opt("fallback_order", ("--fallback-order",), str, ",".join(fusion.FALLBACK_STAGES),
             "comma-separated key fallback stages"),
    ],
    "lr-find": _TRAIN_COMMON + _MODEL_OPTS + [
        _Opt("optimizer", ("--optimizer",), str, "adam", "update rule to probe",
             choices=optim.OPTIMIZER_KINDS),
        _Opt("grid", ("--grid",), str, optim.DEFAULT_LR_GRID, "learning-rate grid lo:hi:logN"),
        _Opt("epochs", ("--epochs",), int, 3, "epochs per probe"),
        _Opt("out", ("--out",), str, help="loss-per-rate CSV to write"),
        _Opt("svg", ("--svg",), str, help="loss-versus-rate chart to write"),
    ],
    "train": _TRAIN_COMMON + _MODEL_OPTS + [
        _Opt("optimizer", ("--optimizer",), str, help="update rule", required=True,
             choices=optim.OPTIMIZER_KINDS),
        _Opt("lr", ("--lr",), float, help="learning rate (default: per-optimizer)"),
        _Opt("epochs", ("--epochs",), int, 20, "training epochs"),
        _Opt("out", ("--out",), str, help="checkpoint file to write", required=True),
        _Opt("history", ("--history",), str, help="per-epoch metrics CSV to write"),
    ],
    "sweep": [
        _Opt("dataset", ("--dataset",), str, help="prepared dataset file", required=True),
        _Opt("pairs", ("--pairs",), str, help="manifest CSV with pair,path rows", required=True),
        _Opt("optimizers", ("--optimizers",), str, ",".join(optim.OPTIMIZER_KINDS),
             "comma-separated update rules"),
        _Opt("lr", ("--lr",), float,
             help="learning rate shared by every cell (default: sgd range search)"),
        _Opt("epochs", ("--epochs",), int, 20, "training epochs per cell"),
        _Opt("batch", ("--batch",), int, 32, "mini-batch size"),
        _Opt("seed", ("--seed",), int, 7, "seed shared by every cell"),
        _Opt("out_dir", ("--out-dir",), str, help="directory for histories.csv and charts",
             required=True),
    ] + _MODEL_OPTS,
    "eval": [
        _Opt("dataset", ("--dataset",), str, help="prepared dataset file", required=True),
        _Opt("ckpt", ("--ckpt",), str, help="checkpoint to evaluate", required=True),
        _Opt("split", ("--split",), str, "test", "which split to score", choices=("train", "test")),
    ],
    "report": [
        _Opt("history", ("--history",), str, help="history CSV from train or sweep", required=True),
        _Opt("out_dir", ("--out-dir",), str, help="directory for charts and summary.csv",
             required=True),
    ],
}

_COMMAND_HELP = {
    "inspect": "parse an embedding file and print its stats",
    "prepare": "build an encoded dataset from a review CSV",
    "fuse": "fuse two embedding tables over a dataset vocabulary",
    "lr-find": "search a learning-rate grid with short training runs",
    "train": "train the classifier and save a checkpoint",
    "sweep": "train every optimizer on every embedding pair",
    "eval": "score a checkpoint on a dataset split",
    "report": "re-render charts and summaries from a history CSV",
}

# every key a config file may define
_ALL_KEYS = sorted({opt.dest for opts in _COMMAND_OPTS.values() for opt in opts})


def _build_parser(command: str) -> _Parser:
    parser = _Parser(prog=f"embfuse {command}", description=_COMMAND_HELP[command],
                     add_help=True)
    for opt in _COMMAND_OPTS[command]:
        if opt.positional:
            parser.add_argument(opt.dest, nargs="?", default=None, help=opt.help)
        elif opt.is_flag:
            parser.add_argument(*opt.flags, dest=opt.dest, action="store_const",
                                const=True, default=None, help=opt.help)
        else:
            parser.add_argument(*opt.flags, dest=opt.dest, type=opt.type, default=None,
                                choices=opt.choices, help=opt.help)
    parser.add_argument("--config", dest="config", type=str, default=None,
                        help="JSON file supplying any of the flags")
    return parser


def _load_config(path: str) -> Dict[str, Any]:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            loaded = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config file is not valid JSON: {exc}") from None
    if not isinstance(loaded, dict):
        raise ValidationError("config file must hold a JSON object")
    for key in loaded:
        if key not in _ALL_KEYS:
            raise ValidationError(f"unknown config key {key!r}")
    return loaded


def _merge(command: str, ns: argparse.Namespace) -> Dict[str, Any]:
    config = _load_config(ns.config) if ns.config else {}
    merged: Dict[str, Any] = {}
    for opt in _COMMAND_OPTS[command]:
        value = getattr(ns, opt.dest)
        if value is None and opt.dest in config:
            value = config[opt.dest]
            if isinstance(value, str) and opt.type is not str and not opt.is_flag:
                value = opt.type(value)
        if value is None:
            value = opt.default if not opt.is_flag else False
        if value is None and opt.required:
            flag = opt.dest if opt.positional else opt.flags[0]
            raise UsageError(f"missing required option {flag}")
        if opt.choices and value is not None and value not in opt.choices:
            raise UsageError(f"{opt.flags[0]} must be one of {', '.join(opt.choices)}")
        merged[opt.dest] = value
    return merged


def _require_file(path: str, what: str) -> str:
    if not os.path.isfile(path):
        raise ValidationError(f"{what} not found: {path}")
    return path


def _write_text(path: str, content: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(content)


def _split_emb_arg(text: str) -> Tuple[str, str]:
    path, sep, fmt = text.rpartition(":")
    if not sep or fmt not in FORMATS:
        raise UsageError(
            f"expected PATH:FORMAT with format one of {', '.join(FORMATS)}, got {text!r}"
        )
    return path, fmt


def _read_dataset(path: str) -> corpus.PreparedDataset:
    _require_file(path, "dataset file")
    with open(path, "r", encoding="utf-8", newline="") as fh:
        return corpus.read_dataset(fh)


def _load_fused_matrix(path: str, dicts: corpus.CorpusDictionaries) -> np.ndarray:
    _require_file(path, "fused embedding file")
    with open(path, "rb") as fh:
        table = parse_embedding(fh, "w2v-bin", name=os.path.basename(path))
    return fusion.matrix_from_table(table, dicts)


def _model_config(opts: Dict[str, Any], max_len: int, emb_dim: int, seed: int) -> model.ModelConfig:
    return model.ModelConfig(
        max_len=max_len,
        emb_dim=emb_dim,
        lstm_units=opts["lstm_units"],
        gru_units=opts["gru_units"],
        spatial_dropout_rate=opts["spatial_dropout"],
        dropout_rate=opts["dropout"],
        seed=seed,
    )


def _safe_name(text: str) -> str:
    cleaned = re.sub(r"[^A-Za-z0-9._-]+", "_", text).strip("_")
    return cleaned or "pair"


# --- command implementations ---

def _run_inspect(opts: Dict[str, Any]) -> int:
    path = _require_file(opts["file"], "embedding file")
    with open(path, "rb") as fh:
        table = parse_embedding(fh, opts["format"], name=os.path.basename(path))
    print(f"name={table.name}")
    print(f"format={opts['format']}")
    print(f"dim={table.dim}")
    print(f"vocab={len(table)}")
    print(f"mean_norm={float(np.linalg.norm(table.mean)):.6f}")
    for warning in table.warnings:
        print(f"WARNING: {warning}")
    return 0


def _run_prepare(opts: Dict[str, Any]) -> int:
    _require_file(opts["csv"], "review CSV")
    buckets = corpus.parse_buckets(opts["buckets"])
    lemmatizer = None
    if opts["lemma_table"]:
        _require_file(opts["lemma_table"], "lemma table")
        with open(opts["lemma_table"], "rb") as fh:
            lemmatizer = corpus.table_lemmatizer(corpus.load_lemma_table(fh))
    with open(opts["csv"], "rb") as fh:
        records, dropped = corpus.load_reviews_csv(fh)
    ds, report = corpus.prepare_corpus(
        records,
        loaded=len(records) + dropped,
        dropped=dropped,
        buckets=buckets,
        include_title=not opts["no_title"],
        max_len=opts["max_len"],
        train_fraction=opts["train_fraction"],
        seed=opts["seed"],
        lemmatizer=lemmatizer,
    )
    with open(opts["out"], "w", encoding="utf-8", newline="\n") as fh:
        corpus.write_dataset(ds, fh)
    for line in report.lines():
        print(line)
    print(f"wrote {opts['out']}")
    return 0


def _run_fuse(opts: Dict[str, Any]) -> int:
    ds = _read_dataset(opts["dataset"])
    tables = []
    for arg in (opts["emb1"], opts["emb2"]):
        path, fmt = _split_emb_arg(arg)
        _require_file(path, "embedding file")
        with open(path, "rb") as fh:
            tables.append(parse_embedding(fh, fmt, name=os.path.basename(path)))
    emb1, emb2 = tables
    for table in tables:
        for warning in table.warnings:
            print(f"WARNING: {table.name}: {warning}")
    if len(emb2) > len(emb1):
        print(
            f"WARNING: second table ({len(emb2)} words) is larger than the first "
            f"({len(emb1)} words); the first table is treated as the primary space"
        )
    order = tuple(s.strip() for s in opts["fallback_order"].split(",") if s.strip())
    fused = fusion.build_fused_matrix(
        ds.dicts, emb1, emb2,
        unknown_fill=opts["unknown_fill"],
        fallback_order=order,
    )
    payload = write_word2vec_binary(fusion.fused_to_table(fused, ds.dicts))
    with open(opts["out"], "wb") as fh:
        fh.write(payload)
    report = fusion.fusion_report(fused, ds.dicts)
    for line in report.lines():
        print(line)
    if opts["report"]:
        import csv as _csv
        with open(opts["report"], "w", encoding="utf-8", newline="") as fh:
            writer = _csv.writer(fh, lineterminator="\n")
            writer.writerow(["key", "value"])
            writer.writerows(report.rows())
    print(f"wrote {opts['out']}")
    return 0


def _split_dataset(ds: corpus.PreparedDataset) -> optim.SplitDataset:
    return optim.SplitDataset.from_examples(ds.train, ds.test)


def _run_lr_find(opts: Dict[str, Any]) -> int:
    ds = _read_dataset(opts["dataset"])
    matrix = _load_fused_matrix(opts["fused"], ds.dicts)
    data = _split_dataset(ds)
    config = _model_config(opts, ds.max_len, matrix.shape[1], opts["seed"])
    grid = optim.parse_lr_grid(opts["grid"])
    best, probes = optim.lr_range_search(
        data, matrix, config, opts["optimizer"],
        grid=grid, epochs=opts["epochs"], batch_size=opts["batch"], seed=opts["seed"],
    )
    for probe in probes:
        if probe.diverged:
            print(f"lr={probe.learning_rate:.3e} diverged")
        else:
            print(f"lr={probe.learning_rate:.3e} final_train_loss={probe.final_loss:.6f}")
    print(f"best_lr={best!r}")
    if opts["out"]:
        with open(opts["out"], "w", encoding="utf-8", newline="") as fh:
            optim.write_lr_table(probes, fh)
    if opts["svg"]:
        _write_text(opts["svg"], charts.lr_chart(probes, f"{opts['optimizer']} learning-rate search"))
    return 0


def _run_train(opts: Dict[str, Any]) -> int:
    ds = _read_dataset(opts["dataset"])
    matrix = _load_fused_matrix(opts["fused"], ds.dicts)
    data = _split_dataset(ds)
    config = _model_config(opts, ds.max_len, matrix.shape[1], opts["seed"])
    lr = opts["lr"] if opts["lr"] is not None else optim.DEFAULT_LR[opts["optimizer"]]
    spec = optim.OptimizerSpec(kind=opts["optimizer"], learning_rate=lr)
    params, hist = optim.train(
        data, matrix, config, spec,
        epochs=opts["epochs"], batch_size=opts["batch"], seed=opts["seed"],
    )
    for i, epoch in enumerate(hist.epochs):
        print(
            f"epoch {epoch}: train_loss={hist.train_loss[i]:.6f} "
            f"train_acc={hist.train_accuracy[i]:.4f} "
            f"test_loss={hist.test_loss[i]:.6f} test_acc={hist.test_accuracy[i]:.4f}"
        )
    if hist.diverged:
        print(f"diverged at epoch {hist.diverged_epoch}")
    with open(opts["out"], "wb") as fh:
        model.save_checkpoint(fh, params, config)
    if opts["history"]:
        with open(opts["history"], "w", encoding="utf-8", newline="") as fh:
            optim.write_history_csv([hist], fh)
    print(f"wrote {opts['out']}")
    return 0


def _load_pairs(path: str, dicts: corpus.CorpusDictionaries) -> List[Tuple[str, np.ndarray]]:
    import csv as _csv
    _require_file(path, "pair manifest")
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = _csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header[:2]] != ["pair", "path"]:
            raise ValidationError("pair manifest must start with a 'pair,path' header")
        base = os.path.dirname(os.path.abspath(path))
        pairs: List[Tuple[str, np.ndarray]] = []
        for row in reader:
            if not row or not any(cell.strip() for cell in row):
                continue
            if len(row) < 2:
                raise ValidationError(f"bad manifest row: {row!r}")
            pair_id = row[0].strip()
            emb_path = row[1].strip()
            if not os.path.isabs(emb_path):
                emb_path = os.path.join(base, emb_path)
            pairs.append((pair_id, _load_fused_matrix(emb_path, dicts)))
    if not pairs:
        raise ValidationError("pair manifest lists no pairs")
    return pairs


def _run_sweep(opts: Dict[str, Any]) -> int:
    ds = _read_dataset(opts["dataset"])
    data = _split_dataset(ds)
    pairs = _load_pairs(opts["pairs"], ds.dicts)
    kinds = tuple(k.strip() for k in opts["optimizers"].split(",") if k.strip())
    for kind in kinds:
        if kind not in optim.OPTIMIZER_KINDS:
            raise UsageError(f"unknown optimizer {kind!r} in --optimizers")
    if not kinds:
        raise UsageError("--optimizers lists no update rules")
    emb_dim = pairs[0][1].shape[1]
    for pair_id, matrix in pairs:
        if matrix.shape[1] != emb_dim:
            raise ValidationError(f"pair {pair_id!r} has dim {matrix.shape[1]}, expected {emb_dim}")
    config = _model_config(opts, ds.max_len, emb_dim, opts["seed"])
    lr = opts["lr"]
    if lr is None:
        lr, _ = optim.lr_range_search(
            data, pairs[0][1], config, "sgd",
            batch_size=opts["batch"], seed=opts["seed"],
        )
        print(f"shared lr from sgd range search on {pairs[0][0]}: {lr!r}")
    histories = optim.optimizer_sweep(
        data, config, pairs,
        learning_rate=lr, kinds=kinds,
        epochs=opts["epochs"], batch_size=opts["batch"], seed=opts["seed"],
    )
    os.makedirs(opts["out_dir"], exist_ok=True)
    csv_path = os.path.join(opts["out_dir"], "histories.csv")
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        optim.write_history_csv(histories, fh)
    for pair_id, _ in pairs:
        group = [h for h in histories if h.pair == pair_id]
        svg_path = os.path.join(opts["out_dir"], f"{_safe_name(pair_id)}.svg")
        _write_text(svg_path, charts.history_chart(group, f"train loss by optimizer: {pair_id}"))
    for h in histories:
        if h.diverged:
            print(f"{h.pair} {h.optimizer}: diverged at epoch {h.diverged_epoch}")
        else:
            print(
                f"{h.pair} {h.optimizer}: train_loss={h.train_loss[-1]:.6f} "
                f"test_acc={h.test_accuracy[-1]:.4f}"
            )
    print(f"wrote {csv_path}")
    return 0


def _run_eval(opts: Dict[str, Any]) -> int:
    ds = _read_dataset(opts["dataset"])
    _require_file(opts["ckpt"], "checkpoint")
    with open(opts["ckpt"], "rb") as fh:
        params, config = model.load_checkpoint(fh)
    data = _split_dataset(ds)
    x, y = (data.train_x, data.train_y) if opts["split"] == "train" else (data.test_x, data.test_y)
    loss, acc = model.evaluate(x, y, params, config)
    pred = model.predict(x, params, config)
    cm = model.confusion_matrix(pred, y)
    print(f"split={opts['split']} examples={len(y)} loss={loss:.6f} accuracy={acc:.6f}")
    print("confusion (rows=truth bad/neutral/good, cols=predicted):")
    for row in cm:
        print("  " + " ".join(f"{int(v):5d}" for v in row))
    return 0


def _run_report(opts: Dict[str, Any]) -> int:
    import csv as _csv
    _require_file(opts["history"], "history CSV")
    with open(opts["history"], "r", encoding="utf-8", newline="") as fh:
        histories = optim.read_history_csv(fh)
    if not histories:
        raise ValidationError("history CSV holds no runs")
    os.makedirs(opts["out_dir"], exist_ok=True)
    pair_ids: List[str] = []
    for h in histories:
        if h.pair not in pair_ids:
            pair_ids.append(h.pair)
    for pair_id in pair_ids:
        group = [h for h in histories if h.pair == pair_id]
        svg_path = os.path.join(opts["out_dir"], f"{_safe_name(pair_id)}.svg")
        _write_text(svg_path, charts.history_chart(
            group, f"train loss by optimizer: {pair_id or '(unnamed)'}"))
    summary_path = os.path.join(opts["out_dir"], "summary.csv")
    with open(summary_path, "w", encoding="utf-8", newline="") as fh:
        writer = _csv.writer(fh, lineterminator="\n")
        writer.writerow([
            "pair", "optimizer", "learning_rate", "epochs",
            "final_train_loss", "final_test_accuracy", "diverged",
        ])
        for h in histories:
            writer.writerow([
                h.pair, h.optimizer, repr(h.learning_rate), len(h.train_loss),
                repr(h.train_loss[-1]) if h.train_loss else "",
                repr(h.test_accuracy[-1]) if h.test_accuracy else "",
                int(h.diverged),
            ])
    for pair_id in pair_ids:
        shown = pair_id or "(unnamed)"
        scored = [h for h in histories if h.pair == pair_id and h.test_accuracy]
        if scored:
            best = max(scored, key=lambda h: h.test_accuracy[-1])
            print(f"{shown}: best={best.optimizer} test_acc={best.test_accuracy[-1]:.4f}")
        else:
            print(f"{shown}: no completed runs")
    print(f"wrote {summary_path}")
    return 0


_RUNNERS = {
    "inspect": _run_inspect,
    "prepare": _run_prepare,
    "fuse": _run_fuse,
    "lr-find": _run_lr_find,
    "train": _run_train,
    "sweep": _run_sweep,
    "eval": _run_eval,
    "report": _run_report,
}


def _usage() -> str:
    lines = ["usage: embfuse <command> [options]", "", "commands:"]
    for name in _RUNNERS:
        lines.append(f"  {name:<10} {_COMMAND_HELP[name]}")
    lines.append("")
    lines.append("run 'embfuse <command> --help' for the command's options")
    return "\n".join(lines)


def dispatch(argv: Sequence[str]) -> int:
    """Parse and run one invocation; returns the process exit code."""
    try:
        if not argv:
            print(_usage(), file=sys.stderr)
            raise UsageError("missing command")
        if argv[0] in ("-h", "--help"):
            print(_usage())
            return 0
        command = argv[0]
        if command not in _RUNNERS:
            raise UnknownCommandError(f"unknown command {command!r}; see 'embfuse --help'")
        parser = _build_parser(command)
        ns = parser.parse_args(list(argv[1:]))
        opts = _merge(command, ns)
        return _RUNNERS[command](opts)
    except SystemExit as exc:  # argparse --help
        code = exc.code
        return int(code) if code else 0
    except EmbfuseError as exc:
        print(f"ERROR {exc.code}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"ERROR io: {exc}", file=sys.stderr)
        return 2


def main(argv: Optional[Sequence[str]] = None) -> int:
    return dispatch(sys.argv[1:] if argv is None else list(argv))


if __name__ == "__main__":
    sys.exit(main())
