"""Command-line entry point: ``gnnrobust {train,sweep,profile,prune,inject}``.

Every flag can also come from a ``--config`` file of ``key=value`` lines
(keys spelled like the flags, with or without leading dashes; ``-`` and
``_`` are interchangeable).  Command-line flags override the file.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from .aggregators.config import AggregatorConfig
from .exceptions import ConfigurationError, GNNRobustError, GraphValidationError, ParseError
from .faults import SITES, EmbeddingInjector, inject_adjacency, inject_store
from .graph import resolve_dataset
from .harness.profile import DEFAULT_AGGS as PROFILE_AGGS
from .harness.profile import profile as run_profile
from .harness.metrics import affected_fraction, trimmed_fraction
from .harness.report import report
from .harness.sweep import DEFAULT_BERS, SweepSpec, clean_final_layer, parse_bers, sweep
from .models import GNN, ForwardTrace, load_checkpoint, magnitude_prune, save_checkpoint
from .trainer import TrainConfig, accuracy, evaluate, train

log = logging.getLogger("gnnrobust")

EXIT_CONFIG = 2


def _csv_list(text):
    return [t.strip() for t in str(text).split(",") if t.strip()]


def _seeds(text):
    items = _csv_list(text)
    if len(items) == 1:
        return tuple(range(int(items[0])))
    return tuple(int(s) for s in items)


def _checkpoint_config(path):
    try:
        with open(os.path.join(path, "config.json"), encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigurationError(f"checkpoint {path!r} not found") from None


def _dataset(args, ckpt=None):
    name = args.dataset or (ckpt and _checkpoint_config(ckpt).get("dataset"))
    if not name:
        raise ConfigurationError("no --dataset given and the checkpoint does not name one")
    return name, resolve_dataset(name)


def _agg_slug(agg):
    return agg.replace(":", "_").replace("=", "").replace(",", "_")


# --- subcommands ------------------------------------------------------------

def cmd_train(args):
    name, graph = _dataset(args)
    model = GNN(args.arch, graph.num_features, args.hidden, graph.num_classes, n_layers=args.layers,
                aggregator=args.agg, dropout=args.dropout, task=graph.task, seed=args.seed)
    cfg = TrainConfig(epochs=args.epochs, lr=args.lr, weight_decay=args.weight_decay,
                      optimizer=args.optimizer, seed=args.seed, patience=args.patience)
    result = train(model, graph, cfg)
    save_checkpoint(model, args.out, extra={"dataset": name})
    acc = evaluate(model, graph, "test")
    print(f"best epoch {result.best_epoch}  val {result.history[result.best_epoch - 1].val_acc:.4f}  "
          f"test {acc:.4f}  -> {args.out}")
    return 0


def cmd_sweep(args):
    base_path = args.ckpt
    templated = "{agg}" in base_path or "{seed}" in base_path
    probe = base_path.format(agg=_agg_slug(_csv_list(args.aggs)[0]), seed=0) if templated else base_path
    name, graph = _dataset(args, probe)
    spec = SweepSpec(checkpoint=base_path, dataset=name, aggregators=tuple(_csv_list(args.aggs)),
                     sites=tuple(_csv_list(args.sites)), bers=parse_bers(args.bers),
                     seeds=_seeds(args.seeds), repeats=args.repeats, out=args.out,
                     rtol=args.rtol, workers=args.workers)
    base = None if templated else load_checkpoint(base_path)

    def model_for(agg):
        if templated:
            return load_checkpoint(base_path.format(agg=_agg_slug(agg), seed=0))
        return base.with_aggregator(agg)

    arch = base.arch if base is not None else _checkpoint_config(probe)["arch"]
    records = sweep(spec, model_for, graph, mask=args.mask, model_name=arch)
    summary = report(records, args.out, write_records=False)
    for c in summary["cells"]:
        print(f"{c['aggregator']:>16} {c['site']:>10} ber={c['ber']:.1e}  acc={c['accuracy_mean']:.4f}"
              f" +-{c['accuracy_ci_high'] - c['accuracy_mean']:.4f}  trimmed={c['trimmed_mean']:.4f}"
              f"  affected={c['affected_mean']:.4f}")
    return 0


def cmd_profile(args):
    dim = args.dim
    if args.ckpt:
        dim = _checkpoint_config(args.ckpt)["hidden"]
    result = run_profile(_csv_list(args.aggs), [int(float(s)) for s in _csv_list(args.sizes)], dim=dim,
                          warmup=args.warmup, iters=args.iters, seed=args.seed)
    rows = result.rows()
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("aggregator", "num_edges", "median_latency_s", "ratio_vs_mean"))
        for agg, size, t, ratio in rows:
            w.writerow((agg, size, repr(t), repr(ratio)))
    fits = {agg: vars(result.fit(agg)) for agg in result.latency}
    with open(os.path.splitext(args.out)[0] + "_fit.json", "w", encoding="utf-8") as fh:
        json.dump(fits, fh, indent=2)
    for agg in result.latency:
        f = fits[agg]
        print(f"{agg:>16}  ratio@{result.sizes[-1]}={result.ratio(agg):6.2f}  "
              f"slope={f['slope']:.3e}s/edge  R2={f['r2']:.4f}")
    return 0


def cmd_prune(args):
    model = load_checkpoint(args.ckpt)
    name, graph = _dataset(args, args.ckpt)
    pruned, achieved = magnitude_prune(model, args.sparsity)
    if args.finetune_epochs > 0:
        cfg = TrainConfig(epochs=args.finetune_epochs, lr=args.lr, weight_decay=args.weight_decay,
                          seed=args.seed, patience=None)
        train(pruned, graph, cfg)
    save_checkpoint(pruned, args.out, extra={"dataset": name, "sparsity": achieved})
    print(f"sparsity {achieved:.6f}  dense test {evaluate(model, graph):.4f}  "
          f"pruned test {evaluate(pruned, graph):.4f}  -> {args.out}")
    return 0


def cmd_inject(args):
    model = load_checkpoint(args.ckpt)
    if args.agg:
        model = model.with_aggregator(args.agg)
    _, graph = _dataset(args, args.ckpt)
    rng = np.random.default_rng(args.seed)
    clean_final = clean_final_layer(model, graph)
    hooks, g, m = (), graph, model
    if args.site == "weights":
        store = {k: model.params[k].value for k in model.weight_keys()}
        corrupted, rep = inject_store(store, args.ber, rng)
        m = model.with_weights(corrupted)
    elif args.site == "embeddings":
        inj = EmbeddingInjector(args.ber, rng).attach(model)
        hooks, rep = (inj,), inj.report
    else:
        g, rep = inject_adjacency(graph, args.ber, rng, return_report=True)
    trace = ForwardTrace()
    logits = m.predict_logits(g, hooks=hooks, trace=trace)
    acc = accuracy(logits, graph.labels, graph.test_mask)
    print(f"accuracy {acc:.4f}")
    print(f"bits_total {rep.bits_total}  bits_flipped {rep.bits_flipped}  words_affected {rep.words_affected}")
    print(f"trimmed_fraction {trimmed_fraction(trace.discarded, trace.total):.6f}  "
          f"affected_fraction {affected_fraction(clean_final, trace.layer_outputs[-1], args.rtol):.6f}")
    return 0


# --- parser -----------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="gnnrobust", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="key=value file supplying defaults for any flag")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model on clean data and write a checkpoint")
    t.add_argument("--arch", choices=("gcn", "gin"), default="gcn")
    t.add_argument("--dataset", default=None, help="graph file or synth:key=val,...")
    t.add_argument("--agg", default="mean", help="aggregator, e.g. distribution:a=3,b=3")
    t.add_argument("--epochs", type=int, default=200)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--hidden", type=int, default=64)
    t.add_argument("--layers", type=int, default=2)
    t.add_argument("--dropout", type=float, default=0.5)
    t.add_argument("--lr", type=float, default=0.01)
    t.add_argument("--weight-decay", type=float, default=5e-4)
    t.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    t.add_argument("--patience", type=int, default=100)
    t.add_argument("--out", required=True, help="checkpoint directory")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="accuracy under injected faults over a BER grid")
    s.add_argument("--ckpt", required=True, help="checkpoint; may contain {agg} to pick one per aggregator")
    s.add_argument("--dataset", default=None)
    s.add_argument("--aggs", default="mean,distribution,dynamic_weight,cosine")
    s.add_argument("--sites", default=",".join(SITES))
    s.add_argument("--bers", default=",".join(repr(b) for b in DEFAULT_BERS),
                   help="comma list or logspace:LO:HI:N")
    s.add_argument("--seeds", default="5", help="count, or comma list of seeds")
    s.add_argument("--repeats", type=int, default=10)
    s.add_argument("--mask", choices=("train", "val", "test"), default="test")
    s.add_argument("--rtol", type=float, default=1e-6, help="relative threshold for 'affected'")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_sweep)

    f = sub.add_parser("profile", help="aggregation latency versus edge count")
    f.add_argument("--ckpt", default=None, help="take the embedding width from this checkpoint")
    f.add_argument("--sizes", default="10000,30000,100000")
    f.add_argument("--aggs", default=",".join(PROFILE_AGGS))
    f.add_argument("--dim", type=int, default=64)
    f.add_argument("--warmup", type=int, default=3)
    f.add_argument("--iters", type=int, default=30)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--out", required=True, help="CSV path")
    f.set_defaults(func=cmd_profile)

    r = sub.add_parser("prune", help="global magnitude pruning plus masked fine-tuning")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--dataset", default=None)
    r.add_argument("--sparsity", type=float, required=True)
    r.add_argument("--finetune-epochs", type=int, default=20)
    r.add_argument("--lr", type=float, default=0.01)
    r.add_argument("--weight-decay", type=float, default=5e-4)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_prune)

    i = sub.add_parser("inject", help="one injection; prints accuracy and the fault report")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--dataset", default=None)
    i.add_argument("--agg", default=None, help="override the checkpoint's aggregator")
    i.add_argument("--site", choices=SITES, required=True)
    i.add_argument("--ber", type=float, required=True)
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--rtol", type=float, default=1e-6)
    i.set_defaults(func=cmd_inject)
    return p


def read_config(path):
    """``key=value`` lines; blank lines and ``#`` comments are ignored."""
    out = {}
    try:
        fh = open(path, encoding="utf-8")
    except OSError:
        raise ConfigurationError(f"config file {path!r} not found") from None
    with fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = line.partition("=")
            if not sep:
                raise ParseError("expected key=value", lineno)
            out[key.strip().lstrip("-").replace("-", "_")] = val.strip()
    return out


def _apply_config(parser, argv):
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    values = read_config(known.config)
    command = next((a for a in argv if a in parser._subparsers._group_actions[0].choices), None)
    if command is None:
        return
    sp = parser._subparsers._group_actions[0].choices[command]
    actions = {a.dest: a for a in sp._actions}
    defaults = {}
    for key, raw in values.items():
        if key not in actions or key in ("help", "func"):
            raise ConfigurationError(f"unknown config key {key!r} for {command}")
        act = actions[key]
        val = act.type(raw) if act.type else raw
        if act.choices is not None and val not in act.choices:
            raise ConfigurationError(f"{key}={raw!r} is not one of {list(act.choices)}")
        defaults[key] = val
        act.required = False
    sp.set_defaults(**defaults)


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        if getattr(args, "aggs", None):
            for agg in _csv_list(args.aggs):
                AggregatorConfig.parse(agg)
        return args.func(args)
    except (ConfigurationError, ParseError, GraphValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except GNNRobustError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
