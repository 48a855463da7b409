"""Command-line entry point: vocab, curate, train, translate, evaluate.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import torch

from .config import RunConfig
from .evalkit import (
    ImprovementRule,
    OracleError,
    PropertyOracle,
    RangeRule,
    build_entry,
    curate_pairs,
    evaluate,
    parse_predicate,
    read_report,
    score_report,
    write_pairs,
    write_report,
)
from .junctree import AssemblyError, ClusterVocab, build_vocab
from .molgraph import iter_smiles_file, parse_smiles
from .tensorcore import NumericError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SEED_ENV = "GRAPH2GRAPH_SEED"

log = logging.getLogger("graph2graph")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _atomic_text(path: str | Path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{path} does not exist")
    return p


def _config(args) -> RunConfig:
    """Defaults, then the config file, then ``--set`` pairs, then explicit flags."""
    cfg = RunConfig.load(_existing(args.config)) if getattr(args, "config", None) else RunConfig()
    changes = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        changes[k.strip()] = v.strip()
    try:
        cfg = cfg.replace(**changes)
    except KeyError as e:
        raise UsageError(str(e.args[0])) from None
    seed = getattr(args, "seed", None)
    if seed is None and os.environ.get(SEED_ENV):
        seed = int(os.environ[SEED_ENV])
    if seed is not None:
        cfg = cfg.replace(seed=seed)
    return cfg


def _parse_rule(spec: str):
    kind, _, rest = spec.partition(":")
    if kind == "improve":
        return ImprovementRule(float(rest))
    if kind == "range":
        vals = [float(v) for v in rest.split(":")]
        if len(vals) != 4:
            raise UsageError("range rule is range:<src lo>:<src hi>:<tgt lo>:<tgt hi>")
        return RangeRule((vals[0], vals[1]), (vals[2], vals[3]))
    raise UsageError(f"unknown rule {spec!r}")


# -- commands ------------------------------------------------------------------


def cmd_vocab(args) -> int:
    mols = [parse_smiles(s) for s in iter_smiles_file(_existing(args.corpus))]
    vocab = build_vocab(mols)
    _atomic_text(args.output, "".join(s + "\n" for s in vocab.entries))
    print(f"{len(vocab)} clusters from {len(mols)} molecules -> {args.output}")
    return EXIT_OK


def cmd_curate(args) -> int:
    corpus = list(iter_smiles_file(_existing(args.corpus)))
    exclude = list(iter_smiles_file(_existing(args.exclude))) if args.exclude else []
    oracle = PropertyOracle.parse(args.oracle)
    pairs = curate_pairs(corpus, oracle, args.delta, _parse_rule(args.rule), exclude)
    write_pairs(pairs, args.output)
    print(f"{len(pairs)} pairs -> {args.output}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .vjtnn import Preparer, read_pairs, train

    cfg = _config(args)
    if args.epochs is not None:
        cfg = cfg.replace(epochs=args.epochs)
    vocab = ClusterVocab.load(_existing(args.vocab))
    rows = read_pairs(_existing(args.pairs))
    out = Path(args.checkpoint_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = cfg.replace(vocab=str(args.vocab), pairs=str(args.pairs), checkpoint_dir=str(out))
    cfg.save(out / "config.txt")
    _atomic_text(out / "vocab.txt", "".join(s + "\n" for s in vocab.entries))
    pairs = Preparer(vocab).pairs(rows)

    def progress(epoch, step, stats):
        if step % max(1, args.log_every) == 0:
            log.info("epoch %d step %d loss %.4f", epoch, step, stats["loss"])

    result = train(pairs, vocab, cfg, out_dir=out, callback=progress)
    print(f"trained {cfg.epochs} epochs on {len(pairs)} pairs; last checkpoint {result.checkpoints[-1]}")
    return EXIT_OK


def _checkpoint_context(args) -> tuple[Path, RunConfig, ClusterVocab]:
    ckpt = _existing(args.checkpoint)
    cfg_path = Path(args.config) if args.config else ckpt.parent / "config.txt"
    vocab_path = Path(args.vocab) if args.vocab else ckpt.parent / "vocab.txt"
    cfg = RunConfig.load(_existing(str(cfg_path)))
    vocab = ClusterVocab.load(_existing(str(vocab_path)))
    return ckpt, cfg, vocab


def cmd_translate(args) -> int:
    from .vjtnn import compatibility, load_model, translate

    ckpt, cfg, vocab = _checkpoint_context(args)
    seed = args.seed
    if seed is None:
        seed = int(os.environ[SEED_ENV]) if os.environ.get(SEED_ENV) else cfg.seed
    K = args.k if args.k is not None else cfg.K
    torch.set_num_threads(1)
    model = load_model(ckpt, vocab, cfg)
    allowed = compatibility(vocab)
    gen = torch.Generator().manual_seed(seed)
    entries = []
    for src in iter_smiles_file(_existing(args.test)):
        entries.append(build_entry(src, translate(model, vocab, src, K, gen, allowed)))
    write_report(entries, args.output)
    print(f"translated {len(entries)} molecules x {K} -> {args.output}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .vjtnn import read_pairs

    entries = read_report(_existing(args.report))
    score_report(entries, PropertyOracle.parse(args.oracle))
    targets = [y for _, y in read_pairs(_existing(args.train_pairs))] if args.train_pairs else None
    metrics = evaluate(entries, args.delta, parse_predicate(args.predicate), targets)
    d = metrics.as_dict()
    for k, v in d.items():
        print(f"{k}\t{v}")
    if args.output:
        _atomic_text(args.output, json.dumps(d, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="graph2graph", description="Junction-tree graph-to-graph molecular translation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("vocab", help="build a cluster vocabulary from a SMILES corpus")
    s.add_argument("corpus")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_vocab)

    s = sub.add_parser("curate", help="select (X, Y) training pairs from a corpus")
    s.add_argument("corpus")
    s.add_argument("--oracle", required=True, help="builtin name or external:<command>")
    s.add_argument("--delta", type=float, default=0.4)
    s.add_argument("--rule", default="improve:1", help="improve:<theta> or range:<slo>:<shi>:<tlo>:<thi>")
    s.add_argument("--exclude", help="SMILES file of held-out molecules")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_curate)

    s = sub.add_parser("train", help="train a translation model")
    s.add_argument("--pairs", required=True)
    s.add_argument("--vocab", required=True)
    s.add_argument("--checkpoint-dir", required=True)
    s.add_argument("--config")
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--log-every", type=int, default=20)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("translate", help="sample K translations per test molecule")
    s.add_argument("test")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--config")
    s.add_argument("--vocab")
    s.add_argument("--k", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_translate)

    s = sub.add_parser("evaluate", help="score a translation report")
    s.add_argument("report")
    s.add_argument("--oracle", required=True)
    s.add_argument("--delta", type=float, default=0.4)
    s.add_argument("--predicate", default="always", help="always, improve:<theta> or range:<lo>:<hi>")
    s.add_argument("--train-pairs", help="pair file whose targets define novelty")
    s.add_argument("-o", "--output", help="JSON metrics path")
    s.set_defaults(func=cmd_evaluate)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, OSError, AssemblyError, OracleError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
