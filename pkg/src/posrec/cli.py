"""Command-line entry point for the whole pipeline.

Verbs: check-encodings, heatmap, preprocess, synth, train, eval,
sweep-encodings, ablate-anchors, sweep-lambda2.

Exit codes: 0 success, 1 usage error, 2 data/validation failure,
3 numerical failure.  Every run prints its manifest hash; when --out-dir
is given the effective configuration is also written there.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import datapipe, evalkit
from . import manifest as mf
from . import model as model_mod
from . import posenc
from .datapipe import DataError, SplitSpec
from .evalkit import NumericalError, TrainConfig
from .model import ModelError
from .posenc import EncodingError
from .sessgraph import GraphError, Session

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# pair/click file io
# ---------------------------------------------------------------------------

def write_pairs_tsv(pairs: list[Session], path) -> None:
    """One labeled pair per line: id, label, end timestamp, comma-joined items."""
    with open(path, "w", encoding="utf-8") as f:
        for k, p in enumerate(pairs):
            items = ",".join(str(i) for i in p.items)
            f.write(f"{k}\t{p.label}\t{p.end_time:.6f}\t{items}\n")


def read_pairs_tsv(path) -> list[Session]:
    pairs = []
    try:
        handle = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    with handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                _, label, end_ts, items = line.split("\t")
                ids = [int(x) for x in items.split(",")]
                end = float(end_ts)
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: bad pair line {line!r}") from exc
            ts = [end - (len(ids) - 1 - j) for j in range(len(ids))]
            pairs.append(Session(items=ids, timestamps=ts, label=int(label)))
    if not pairs:
        raise DataError(f"no pairs in {path}")
    return pairs


def write_clicks_tsv(sessions: list[Session], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for k, s in enumerate(sessions):
            ts = s.timestamps or [0.0] * len(s)
            for t, item in zip(ts, s.items):
                f.write(f"{k}\t{t:.6f}\t{item}\n")


# ---------------------------------------------------------------------------
# option plumbing
# ---------------------------------------------------------------------------

def _parse_fraction(text: str) -> float:
    if "/" in text:
        num, den = text.split("/", 1)
        return int(num) / int(den)
    return float(text)


def _coerce(text: str, template):
    if isinstance(template, bool):
        return text.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(template, int):
        return int(text)
    if isinstance(template, float):
        return float(text)
    return text


_TRAIN_FLAGS = ("lr", "lr_decay", "decay_every", "batch_size", "d", "l2", "max_epochs",
                "seed", "scheme", "anchor_enabled", "lambda0", "lambda1", "lambda2",
                "layer_norm", "heads", "max_len", "val_fraction", "threads")


def _add_train_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--lr", type=float, help="initial learning rate")
    sub.add_argument("--lr-decay", dest="lr_decay", type=float, help="decay factor")
    sub.add_argument("--decay-every", dest="decay_every", type=int, help="epochs between decays")
    sub.add_argument("--batch", dest="batch_size", type=int, help="mini-batch size")
    sub.add_argument("--d", type=int, help="embedding width")
    sub.add_argument("--l2", type=float, help="l2 coefficient")
    sub.add_argument("--epochs", dest="max_epochs", type=int, help="epoch cap")
    sub.add_argument("--seed", type=int, help="rng seed")
    sub.add_argument("--scheme", choices=posenc.ALL_KINDS, help="positional encoding kind")
    sub.add_argument("--anchors", dest="anchor_enabled", action="store_true", default=None,
                     help="enable anchor aggregation")
    sub.add_argument("--no-anchors", dest="anchor_enabled", action="store_false", default=None,
                     help="disable anchor aggregation")
    sub.add_argument("--lambda0", type=float, help="weight of last node's graph-layer state")
    sub.add_argument("--lambda1", type=float, help="weight of last node's attended state")
    sub.add_argument("--lambda2", type=float, help="weight of first node's attended state")
    sub.add_argument("--layer-norm", dest="layer_norm", action="store_true", default=None)
    sub.add_argument("--no-layer-norm", dest="layer_norm", action="store_false", default=None)
    sub.add_argument("--heads", type=int, help="attention head count")
    sub.add_argument("--max-len", dest="max_len", type=int, help="position table capacity")
    sub.add_argument("--val-fraction", dest="val_fraction", type=float,
                     help="held-out fraction for per-epoch reports")
    sub.add_argument("--threads", type=int, help="worker count (1 keeps runs bit-reproducible)")


def _effective_config(args) -> TrainConfig:
    """defaults < config file < command-line flags."""
    base = TrainConfig()
    values = {f.name: getattr(base, f.name) for f in fields(TrainConfig)}
    file_conf = mf.read(args.config) if getattr(args, "config", None) else {}
    for key, text in file_conf.items():
        if key in values:
            template = values[key] if values[key] is not None else 0
            values[key] = _coerce(text, template)
    for key in _TRAIN_FLAGS:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    return TrainConfig(**values)


def _emit_manifest(mapping: dict, out_dir: str | None) -> str:
    text = mf.dumps(mapping)
    digest = mf.digest(text)
    if out_dir:
        path = Path(out_dir)
        path.mkdir(parents=True, exist_ok=True)
        (path / "manifest.txt").write_text(text, encoding="utf-8")
    print(f"manifest {digest}")
    return digest


def _out_path(out_dir: str, name: str) -> Path:
    path = Path(out_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path / name


# ---------------------------------------------------------------------------
# verbs
# ---------------------------------------------------------------------------

def _cmd_check_encodings(args) -> int:
    lengths = range(1, args.max_len + 1)
    rows = []
    kinds = [k for k in posenc.ALL_KINDS if k != posenc.LRPE]
    for kind in kinds:
        scheme = posenc.make_scheme(kind, args.dims, args.max_len, seed=args.seed)
        report = posenc.check_awareness(scheme, lengths, epsilon=args.epsilon, delta=args.delta)
        rows.append((kind, report.forward_aware, report.backward_aware))
    _emit_manifest({"verb": "check-encodings", "dims": args.dims, "max_len": args.max_len,
                    "seed": args.seed, "epsilon": args.epsilon, "delta": args.delta},
                   args.out_dir)
    print(f"{'scheme':<8}{'forward':<9}{'backward'}")
    for kind, fwd, bwd in rows:
        print(f"{kind:<8}{'yes' if fwd else 'no':<9}{'yes' if bwd else 'no'}")
    return EXIT_OK


def _cmd_heatmap(args) -> int:
    max_len = max(args.max_len or 0, args.l1, args.l2)
    if args.checkpoint:
        loaded = model_mod.load_checkpoint(args.checkpoint)
        scheme = loaded.scheme
        if scheme.kind != args.scheme:
            raise DataError(f"checkpoint holds {scheme.kind}, not {args.scheme}")
    else:
        if args.scheme in posenc.LEARNED_KINDS:
            raise DataError(f"{args.scheme} is learned; supply --checkpoint with trained tables")
        scheme = posenc.make_scheme(args.scheme, args.dims, max_len, seed=args.seed)
    out = _out_path(args.out_dir, f"heatmap_{args.scheme}_{args.l1}x{args.l2}.csv")
    written = evalkit.export_heatmap(scheme, args.l1, args.l2, out)
    _emit_manifest({"verb": "heatmap", "scheme": args.scheme, "dims": scheme.dim,
                    "l1": args.l1, "l2": args.l2, "seed": args.seed,
                    "checkpoint": args.checkpoint or ""}, args.out_dir)
    for path in written:
        print(f"wrote {path}")
    return EXIT_OK


def _cmd_preprocess(args) -> int:
    spec = SplitSpec(test_rule=args.test_rule, fraction=_parse_fraction(args.fraction),
                     augment=not args.no_augment)
    ds = datapipe.parse_raw(args.data, args.format)
    ds = datapipe.filter_dataset(ds)
    train_ds, test_ds = datapipe.split(ds, spec)
    write_clicks_tsv(train_ds.sessions, _out_path(args.out_dir, "train_clicks.tsv"))
    write_clicks_tsv(test_ds.sessions, _out_path(args.out_dir, "test_clicks.tsv"))
    with open(_out_path(args.out_dir, "vocab.tsv"), "w", encoding="utf-8") as f:
        for raw, idx in sorted(train_ds.vocab.items(), key=lambda kv: kv[1]):
            f.write(f"{raw}\t{idx}\n")
    counts = {}
    if spec.augment:
        train_pairs = datapipe.augment(train_ds)
        test_pairs = datapipe.augment(test_ds)
        write_pairs_tsv(train_pairs, _out_path(args.out_dir, "train_pairs.tsv"))
        write_pairs_tsv(test_pairs, _out_path(args.out_dir, "test_pairs.tsv"))
        counts = {"train_pairs": len(train_pairs), "test_pairs": len(test_pairs)}
    stats = train_ds.stats()
    _emit_manifest({"verb": "preprocess", "source": args.data, "format": args.format,
                    "test_rule": spec.test_rule, "fraction": spec.fraction,
                    "augment": spec.augment, "train_sessions": stats["sessions"],
                    "train_clicks": stats["clicks"], "items": stats["items"],
                    "test_sessions": len(test_ds.sessions), **counts}, args.out_dir)
    print(f"train sessions={stats['sessions']} items={stats['items']} "
          f"test sessions={len(test_ds.sessions)}")
    return EXIT_OK


def _cmd_synth(args) -> int:
    ds = datapipe.synth_generate(args.m, args.n, (args.len_min, args.len_max), seed=args.seed)
    write_pairs_tsv(ds.sessions, _out_path(args.out_dir, "pairs.tsv"))
    _emit_manifest({"verb": "synth", **ds.meta}, args.out_dir)
    print(f"wrote {args.n} labeled sessions over {args.m} items")
    return EXIT_OK


def _cmd_train(args) -> int:
    config = _effective_config(args)
    pairs = read_pairs_tsv(args.data)
    model, reports = evalkit.train(pairs, config)
    digest = _emit_manifest({"verb": "train", "data": args.data,
                             **config.to_manifest()}, args.out_dir)
    model_mod.save_checkpoint(model, _out_path(args.out_dir, "checkpoint.bin"))
    lines = ["epoch,R@5,R@10,M@5,M@10,N"]
    for e, rep in enumerate(reports, start=1):
        lines.append(f"{e},{rep.recall[5]:.2f},{rep.recall[10]:.2f},"
                     f"{rep.mrr[5]:.2f},{rep.mrr[10]:.2f},{rep.n}")
    _out_path(args.out_dir, "train_metrics.csv").write_text("\n".join(lines) + "\n",
                                                            encoding="utf-8")
    if args.test:
        test_pairs = read_pairs_tsv(args.test)
        report = evalkit.evaluate(model, test_pairs, ks=(1, 5, 10))
        report.manifest_hash = digest
        _out_path(args.out_dir, "results.csv").write_text(
            evalkit.results_csv([(config.scheme, report, config.seed, digest)]),
            encoding="utf-8")
        print(f"test {report.describe()}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    model = model_mod.load_checkpoint(args.checkpoint)
    pairs = read_pairs_tsv(args.data)
    report = evalkit.evaluate(model, pairs, ks=(1, 5, 10))
    digest = _emit_manifest({"verb": "eval", "checkpoint": args.checkpoint,
                             "data": args.data, **model.manifest()}, args.out_dir)
    report.manifest_hash = digest
    _out_path(args.out_dir, "results.csv").write_text(
        evalkit.results_csv([(model.scheme.kind, report, model.seed, digest)]),
        encoding="utf-8")
    print(f"eval {report.describe()}")
    return EXIT_OK


def _load_train_test(args) -> tuple[list[Session], list[Session]]:
    train_pairs = read_pairs_tsv(args.data)
    test_pairs = read_pairs_tsv(args.test)
    return train_pairs, test_pairs


def _cmd_sweep_encodings(args) -> int:
    config = _effective_config(args)
    kinds = [k.strip() for k in args.kinds.split(",") if k.strip()]
    train_pairs, test_pairs = _load_train_test(args)
    results = evalkit.run_encoding_sweep(train_pairs, test_pairs, config, kinds)
    digest = _emit_manifest({"verb": "sweep-encodings", "kinds": ",".join(kinds),
                             "data": args.data, "test": args.test,
                             **config.to_manifest()}, args.out_dir)
    rows = [(kind, rep, config.seed, digest) for kind, rep in results]
    _out_path(args.out_dir, "results.csv").write_text(evalkit.results_csv(rows),
                                                      encoding="utf-8")
    for kind, rep in results:
        print(f"{kind}: {rep.describe()}")
    return EXIT_OK


def _cmd_ablate_anchors(args) -> int:
    config = _effective_config(args)
    train_pairs, test_pairs = _load_train_test(args)
    rep_on, rep_off = evalkit.run_anchor_ablation(train_pairs, test_pairs, config)
    digest = _emit_manifest({"verb": "ablate-anchors", "data": args.data,
                             "test": args.test, **config.to_manifest()}, args.out_dir)
    rows = [("anchors-on", rep_on, config.seed, digest),
            ("anchors-off", rep_off, config.seed, digest)]
    _out_path(args.out_dir, "results.csv").write_text(evalkit.results_csv(rows),
                                                      encoding="utf-8")
    print(f"anchors-on  {rep_on.describe()}")
    print(f"anchors-off {rep_off.describe()}")
    return EXIT_OK


def _cmd_sweep_lambda2(args) -> int:
    config = _effective_config(args)
    values = [float(v) for v in args.values.split(",") if v.strip()]
    train_pairs, test_pairs = _load_train_test(args)
    results = evalkit.run_lambda2_sweep(train_pairs, test_pairs, config, values)
    digest = _emit_manifest({"verb": "sweep-lambda2", "values": args.values,
                             "data": args.data, "test": args.test,
                             **config.to_manifest()}, args.out_dir)
    rows = [(f"lambda2={v:g}", rep, config.seed, digest) for v, rep in results]
    _out_path(args.out_dir, "results.csv").write_text(evalkit.results_csv(rows),
                                                      encoding="utf-8")
    for v, rep in results:
        print(f"lambda2={v:g}: {rep.describe()}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="posrec", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    subs = parser.add_subparsers(dest="verb", required=True)

    def common(sub):
        sub.add_argument("--out-dir", default=None, help="directory for outputs and manifest")
        sub.add_argument("--config", default=None, help="flat key = value config file")

    p = subs.add_parser("check-encodings", help="print the awareness table for all schemes")
    p.add_argument("--dims", type=int, default=16)
    p.add_argument("--max-len", dest="max_len", type=int, default=12)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epsilon", type=float, default=posenc.DEFAULT_EPSILON)
    p.add_argument("--delta", type=float, default=posenc.DEFAULT_DELTA)
    common(p)
    p.set_defaults(func=_cmd_check_encodings)

    p = subs.add_parser("heatmap", help="export pairwise dot-product heatmaps")
    p.add_argument("--scheme", required=True, choices=[k for k in posenc.ALL_KINDS if k != posenc.LRPE])
    p.add_argument("--dims", type=int, default=100)
    p.add_argument("--max-len", dest="max_len", type=int, default=None)
    p.add_argument("--l1", type=int, default=10)
    p.add_argument("--l2", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--checkpoint", default=None, help="trained model for learned kinds")
    common(p)
    p.set_defaults(func=_cmd_heatmap)
    p.set_defaults(require_out=True)

    p = subs.add_parser("preprocess", help="parse, filter, split, and augment a click log")
    p.add_argument("--data", required=True)
    p.add_argument("--format", required=True, choices=("yoochoose", "diginetica", "tsv"))
    p.add_argument("--fraction", default="1", help="training fraction: 1, 1/4, or 1/64")
    p.add_argument("--test-rule", dest="test_rule", default="final-day",
                   choices=("final-day", "final-week"))
    p.add_argument("--no-augment", action="store_true")
    common(p)
    p.set_defaults(func=_cmd_preprocess)
    p.set_defaults(require_out=True)

    p = subs.add_parser("synth", help="generate a deterministic labeled synthetic dataset")
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--len-min", dest="len_min", type=int, default=2)
    p.add_argument("--len-max", dest="len_max", type=int, default=19)
    p.add_argument("--seed", type=int, default=0)
    common(p)
    p.set_defaults(func=_cmd_synth)
    p.set_defaults(require_out=True)

    p = subs.add_parser("train", help="train on labeled pairs")
    p.add_argument("--data", required=True, help="training pairs tsv")
    p.add_argument("--test", default=None, help="test pairs tsv")
    _add_train_flags(p)
    common(p)
    p.set_defaults(func=_cmd_train)
    p.set_defaults(require_out=True)

    p = subs.add_parser("eval", help="evaluate a checkpoint on labeled pairs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    common(p)
    p.set_defaults(func=_cmd_eval)
    p.set_defaults(require_out=True)

    p = subs.add_parser("sweep-encodings", help="train once per encoding kind")
    p.add_argument("--data", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--kinds", required=True, help="comma-separated kinds")
    _add_train_flags(p)
    common(p)
    p.set_defaults(func=_cmd_sweep_encodings)
    p.set_defaults(require_out=True)

    p = subs.add_parser("ablate-anchors", help="train with and without anchor aggregation")
    p.add_argument("--data", required=True)
    p.add_argument("--test", required=True)
    _add_train_flags(p)
    common(p)
    p.set_defaults(func=_cmd_ablate_anchors)
    p.set_defaults(require_out=True)

    p = subs.add_parser("sweep-lambda2", help="sweep the first-state readout weight")
    p.add_argument("--data", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--values", default="0.25,0.5,1,2")
    _add_train_flags(p)
    common(p)
    p.set_defaults(func=_cmd_sweep_lambda2)
    p.set_defaults(require_out=True)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "require_out", False) and not args.out_dir:
            raise UsageError(f"{args.verb} requires --out-dir")
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        if exc.batch is not None:
            print(f"offending batch: {exc.batch}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, EncodingError, GraphError, ModelError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
