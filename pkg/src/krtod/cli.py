"""Command-line entry point: ``krtod <subcommand> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import sys
import time
from pathlib import Path

from . import __version__
from .errors import ConfigError, KRTODError, NumericError

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3
SPLITS = ("labeled", "unlabeled", "dev", "test")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(where: Path, command: str, args, config: dict, inputs: dict, outputs: dict,
                   started: float, extra: dict | None = None) -> Path:
    """Record how an output was produced, next to it."""
    where = Path(where)
    target = where / "manifest.json" if where.is_dir() else where.with_name(where.name + ".manifest.json")
    checksums = {}
    for name, p in outputs.items():
        p = Path(p)
        if p.is_file():
            checksums[name] = _sha256(p)
    manifest = {
        "command": command,
        "argv": sys.argv[1:] if args is None else vars(args).get("_argv", []),
        "version": __version__,
        "config": config,
        "seed": config.get("seed"),
        "inputs": {k: str(v) for k, v in inputs.items() if v is not None},
        "outputs": {k: str(v) for k, v in outputs.items()},
        "checksums": checksums,
        "wall_clock_seconds": round(time.time() - started, 3),
        "python": platform.python_version(),
    }
    if extra:
        manifest.update(extra)
    target.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return target


# -- subcommands -----------------------------------------------------------------


def cmd_gen_data(args) -> int:
    from dataclasses import asdict, replace

    from .corpus import CorpusConfig, generate_splits, save_corpus

    started = time.time()
    cfg = CorpusConfig.from_file(args.config) if args.config else CorpusConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.noise_rate is not None:
        cfg = replace(cfg, noise_rate=args.noise_rate)
    cfg.validate()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    splits = generate_splits(cfg)
    paths = {}
    for name in SPLITS:
        paths[name] = out / f"{name}.jsonl"
        save_corpus(splits[name], paths[name])
    cfg.to_file(out / "corpus.cfg")
    write_manifest(out, "gen-data", args, asdict(cfg), {"config": args.config}, paths, started)
    for name in SPLITS:
        print(f"{name}: {len(splits[name])} dialogs, {splits[name].n_turns()} turns -> {paths[name]}")
    return 0


def _train_config(args):
    from .trainer import TrainConfig

    overrides = {"method": getattr(args, "method", None), "seed": args.seed,
                 "ratio": getattr(args, "ratio", None)}
    if args.config:
        return TrainConfig.from_file(args.config, **overrides)
    return TrainConfig(**{k: v for k, v in overrides.items() if v is not None})


def _load(path, vocab=None):
    from .corpus import load_corpus

    return load_corpus(path, vocab) if path else None


def cmd_train(args) -> int:
    from .models import load_checkpoint, save_checkpoint
    from .trainer import TrainLog, train

    started = time.time()
    cfg = _train_config(args)
    labeled = _load(args.labeled)
    unlabeled = _load(args.unlabeled, labeled.vocabulary)
    dev = _load(args.dev, labeled.vocabulary)
    if cfg.method != "supervised" and unlabeled is None and args.init is None:
        print("note: no unlabeled data; semi-supervised training reduces to supervised", file=sys.stderr)
    pretrained = None
    if args.init:
        theta, phi, header = load_checkpoint(args.init)
        if header["vocab_hash"] and header["vocab_hash"] != labeled.vocabulary.digest():
            raise ConfigError("--init checkpoint was trained on a different vocabulary")
        pretrained = (theta, phi)
    log = TrainLog(echo=print)
    theta, phi = train(cfg.method, labeled, unlabeled, cfg, dev, log, pretrained)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, theta, phi, labeled.vocabulary.digest(), {"train": cfg.to_dict()})
    write_manifest(out, "train", args, cfg.to_dict(),
                   {"labeled": args.labeled, "unlabeled": args.unlabeled, "dev": args.dev, "init": args.init},
                   {"checkpoint": out}, started, {"epochs": log.records})
    return 0


def cmd_decode(args) -> int:
    from .decode import run_corpus, write_predictions
    from .models import load_checkpoint

    started = time.time()
    theta, _, header = load_checkpoint(args.ckpt)
    corpus = _load(args.data)
    if header["vocab_hash"] and header["vocab_hash"] != corpus.vocabulary.digest():
        raise ConfigError("checkpoint and data use different vocabularies")
    recs = run_corpus(theta, corpus, args.threshold, args.mode, args.seed, args.max_len)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_predictions(recs, out)
    cfg = {"threshold": args.threshold, "mode": args.mode, "seed": args.seed, "max_len": args.max_len}
    write_manifest(out, "decode", args, cfg, {"ckpt": args.ckpt, "data": args.data}, {"predictions": out}, started)
    print(f"{len(recs)} predictions -> {out}")
    return 0


def _emit(report: dict, out):
    text = json.dumps(report, indent=2, sort_keys=True)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + "\n")


def cmd_eval(args) -> int:
    from .decode import read_predictions
    from .evalmetrics import evaluate

    started = time.time()
    gold = _load(args.gold)
    rep = evaluate(read_predictions(args.pred), gold)
    _emit(rep.to_dict(), args.out)
    for k, v in rep.display().items():
        print(f"{k} = {v}")
    if args.out:
        write_manifest(Path(args.out), "eval", args, {}, {"pred": args.pred, "gold": args.gold},
                       {"report": args.out}, started)
    return 0


def cmd_compare(args) -> int:
    from .decode import read_predictions
    from .evalmetrics import compare

    started = time.time()
    gold = _load(args.gold)
    a, b, p = compare(read_predictions(args.pred_a), read_predictions(args.pred_b), gold,
                      args.permutations, args.seed)
    _emit({"a": a.to_dict(), "b": b.to_dict(), "p_value": p}, args.out)
    print(f"a: {a.display()}")
    print(f"b: {b.display()}")
    print(f"p_value = {p:.6g}")
    if args.out:
        write_manifest(Path(args.out), "compare", args, {"permutations": args.permutations, "seed": args.seed},
                       {"pred_a": args.pred_a, "pred_b": args.pred_b, "gold": args.gold},
                       {"report": args.out}, started)
    return 0


def cmd_sweep(args) -> int:
    from .models import load_checkpoint
    from .trainer import TrainLog, parse_ratio, sweep

    started = time.time()
    cfg = _train_config(args)
    labeled = _load(args.labeled)
    unlabeled = _load(args.unlabeled, labeled.vocabulary)
    test = _load(args.test, labeled.vocabulary)
    dev = _load(args.dev, labeled.vocabulary)
    ratios = [parse_ratio(r) for r in args.ratios.split(",")]
    pretrained = None
    if args.init:
        theta, phi, _ = load_checkpoint(args.init)
        pretrained = (theta, phi)
    log = TrainLog(echo=(print if args.verbose else None))
    rows = sweep(labeled, unlabeled, test, cfg, ratios, pretrained, dev, args.permutations, log)
    print("method ratio success bleu4 combined p_value")
    for r in rows:
        print(f"{r['method']} {r['ratio']} {r['success']:.1f} {r['bleu4']:.3f} {r['combined']:.2f} {r['p_value']:.4g}")
    _emit({"rows": rows}, args.out)
    if args.out:
        write_manifest(Path(args.out), "sweep", args, cfg.to_dict(),
                       {"labeled": args.labeled, "unlabeled": args.unlabeled, "test": args.test},
                       {"report": args.out}, started)
    return 0


def cmd_sampler_diag(args) -> int:
    import numpy as np

    from .oracle import chain_report, tiny_instance

    started = time.time()
    rng = np.random.default_rng(args.seed)
    lines = []
    for i in range(args.instances):
        inst = tiny_instance(rng, args.entries, args.actions, args.max_act_len, args.turns)
        for row in chain_report(inst, args.steps, rng, args.mix):
            line = f"instance={i} " + " ".join(
                f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items())
            lines.append(line)
            print(line)
    if args.out:
        Path(args.out).write_text("\n".join(lines) + "\n")
        write_manifest(Path(args.out), "sampler-diag", args, vars_clean(args), {}, {"report": args.out}, started)
    return 0


def vars_clean(args) -> dict:
    return {k: v for k, v in vars(args).items() if not k.startswith("_") and k != "func"}


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="krtod", description="Knowledge-retrieval TOD models with JSA semi-supervised training.")
    p.add_argument("--version", action="version",
                   version=f"krtod {__version__} (python {platform.python_version()})")
    p.add_argument("--threads", type=int, default=None, help="cap numeric library worker threads")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic corpus and its splits")
    g.add_argument("--config", help="flat key = value corpus config")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int)
    g.add_argument("--noise-rate", type=float)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="pretrain, or run JSA / pseudo-label training")
    t.add_argument("--method", choices=("supervised", "jsa", "pl"), default=None)
    t.add_argument("--ratio", help="unlabeled:labeled, e.g. 9:1")
    t.add_argument("--config", help="flat key = value training config")
    t.add_argument("--labeled", required=True)
    t.add_argument("--unlabeled")
    t.add_argument("--dev", help="labeled dev corpus for early stopping")
    t.add_argument("--init", help="start from this checkpoint instead of pretraining")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("decode", help="predict actions and responses for a corpus")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--threshold", type=float, default=0.5)
    d.add_argument("--mode", choices=("greedy", "sampled"), default="greedy")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--max-len", type=int, default=64)
    d.set_defaults(func=cmd_decode)

    e = sub.add_parser("eval", help="score predictions")
    e.add_argument("--pred", required=True)
    e.add_argument("--gold", required=True)
    e.add_argument("--out", help="JSON report path")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="score two systems and run the paired permutation test")
    c.add_argument("--pred-a", required=True)
    c.add_argument("--pred-b", required=True)
    c.add_argument("--gold", required=True)
    c.add_argument("--permutations", type=int, default=10000)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out")
    c.set_defaults(func=cmd_compare)

    s = sub.add_parser("sweep", help="JSA vs pseudo-labeling across unlabeled:labeled ratios")
    s.add_argument("--labeled", required=True)
    s.add_argument("--unlabeled", required=True)
    s.add_argument("--test", required=True)
    s.add_argument("--dev")
    s.add_argument("--config")
    s.add_argument("--init", help="pretrained checkpoint shared by all runs")
    s.add_argument("--ratios", default="1:1,2:1,4:1,9:1")
    s.add_argument("--permutations", type=int, default=10000)
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.add_argument("--verbose", action="store_true")
    s.set_defaults(func=cmd_sweep)

    m = sub.add_parser("sampler-diag", help="check MIS chains against exact posteriors on tiny instances")
    m.add_argument("--instances", type=int, default=10)
    m.add_argument("--steps", type=int, default=20000)
    m.add_argument("--entries", type=int, default=2)
    m.add_argument("--actions", type=int, default=2)
    m.add_argument("--max-act-len", type=int, default=2)
    m.add_argument("--turns", type=int, default=1)
    m.add_argument("--mix", type=float, default=0.5, help="posterior weight in the proposal")
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--out")
    m.set_defaults(func=cmd_sampler_diag)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        args._argv = list(sys.argv[1:] if argv is None else argv)
        if args.threads:
            for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
                os.environ[var] = str(args.threads)
        return args.func(args)
    except SystemExit as exc:
        # --help / --version
        return int(exc.code or 0)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"krtod: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, ArithmeticError) as exc:
        print(f"krtod: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (KRTODError, ValueError, KeyError, OSError) as exc:
        print(f"krtod: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
