"""Command-line entry point: gen-data, pretrain, train, eval, decode.

Exit codes: 0 success, 1 usage/configuration error, 2 data or I/O error,
3 numeric failure (non-finite loss and the like).
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_run_config
from .ctc import DecodeConfig, GlossVocabulary, decode, write_decodes
from .data import check_files, generate_synthetic_dataset, read_manifest
from .ensemble import ABLATIONS, ensemble_log_probs, load_samples, model_checkpoint, model_from_checkpoint, \
    train_ensemble
from .errors import ConfigError, DataError, IncompatibleCheckpointError, IntegrityError, NumericError
from .evaluation import ALPHA_GRID, BEAM_GRID, EvalItem, evaluate_run, json_line
from .pretraining import run_pretraining

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key = value config file (overrides defaults; flags override it)")
    p.add_argument("--seed", type=int, help="root seed, fanned out per component")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="signrec", description=__doc__.splitlines()[0],
                     epilog="Config precedence: defaults < --config file < command-line flags.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic corpus (manifests, vocab, keypoint streams)")
    _common(g)
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--vocab-size", type=int)
    g.add_argument("--train-size", type=int)
    g.add_argument("--dev-size", type=int)
    g.add_argument("--test-size", type=int)
    g.add_argument("--max-len", type=int)

    p = sub.add_parser("pretrain", help="denoising pretraining on the train split's keypoint features")
    _common(p)
    p.add_argument("--data", type=Path, required=True, help="corpus directory (train.tsv)")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--sigma", type=float, help="noise standard deviation (default 0.2)")
    p.add_argument("--epochs", type=int, dest="pretrain_epochs")
    p.add_argument("--lr", type=float, dest="pretrain_lr")
    p.add_argument("--resume", type=Path, help="continue from a pretraining checkpoint")

    t = sub.add_parser("train", help="train the ensemble; writes model.ckpt and metrics.jsonl")
    _common(t)
    t.add_argument("--data", type=Path, required=True, help="corpus directory (train.tsv, dev.tsv, vocab.txt)")
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--ablation", choices=sorted(ABLATIONS), help="preset for the three ablation flags")
    t.add_argument("--pretrained", type=Path, help="pretraining checkpoint for the encoder slots")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)

    e = sub.add_parser("eval", help="dev-set (alpha, beam) search, then dev/test report")
    _common(e)
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--model", type=Path, required=True)
    e.add_argument("--out", type=Path, help="write report.txt, report.jsonl and per-split decodes here")
    e.add_argument("--beam", type=int, help="fix the beam size (requires --alpha)")
    e.add_argument("--alpha", type=float, help="fix the length-penalty alpha (requires --beam)")

    d = sub.add_parser("decode", help="decode a manifest to 'id<TAB>glosses' lines")
    _common(d)
    d.add_argument("--model", type=Path, required=True)
    d.add_argument("--manifest", type=Path, required=True)
    d.add_argument("--out", type=Path, required=True)
    d.add_argument("--mode", choices=("greedy", "beam"), default="beam")
    d.add_argument("--beam", type=int, default=1)
    d.add_argument("--alpha", type=float, default=0.0)
    return parser


def _config(args, **overrides) -> RunConfig:
    return load_run_config(args.config, {"seed": args.seed, **overrides})


def _write_outputs(out: Path, cfg: RunConfig) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())


def cmd_gen_data(args) -> int:
    cfg = _config(args, vocab_size=args.vocab_size, train_size=args.train_size, dev_size=args.dev_size,
                  test_size=args.test_size, max_len=args.max_len)
    syn = cfg.synthetic()
    syn.validate()
    try:
        manifests = generate_synthetic_dataset(args.out, syn, cfg.seed)
    except OSError as exc:
        raise DataError(f"cannot write corpus to {args.out}: {exc}") from exc
    for split, m in manifests.items():
        glosses = sum(len(r.glosses) for r in m.records)
        print(f"{split}: {len(m)} sequences, {glosses} glosses -> {args.out / (split + '.tsv')}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _config(args, sigma=args.sigma, pretrain_epochs=args.pretrain_epochs, pretrain_lr=args.pretrain_lr)
    resume = load_checkpoint(args.resume) if args.resume else None
    manifest = read_manifest(args.data / "train.tsv")
    check_files(manifest)
    _write_outputs(args.out, cfg)
    res = run_pretraining(manifest, cfg.pretrain(), log_path=args.out / "pretrain_log.jsonl", resume=resume)
    save_checkpoint(res.checkpoint, args.out / "pretrain.ckpt")
    last = res.history[-1] if res.history else {}
    print(f"pretrained {len(res.history)} epochs; final per-component mse {last.get('per_component', float('nan')):.5f}"
          f" -> {args.out / 'pretrain.ckpt'}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args, epochs=args.epochs, lr=args.lr)
    if args.ablation:
        cfg = cfg.with_preset(args.ablation)
    if cfg.pretrained_conformer and args.pretrained is None:
        raise UsageError("the pretrained-conformer flag is on (preset or config) but --pretrained was not given")
    pretrained = load_checkpoint(args.pretrained) if cfg.pretrained_conformer else None
    vocab = GlossVocabulary.load(args.data / "vocab.txt")
    ens = cfg.ensemble(len(vocab.symbols))
    train_m, dev_m = read_manifest(args.data / "train.tsv"), read_manifest(args.data / "dev.tsv")
    for m in (train_m, dev_m):
        check_files(m)
    train = load_samples(train_m, vocab, ens.extractor)
    dev = load_samples(dev_m, vocab, ens.extractor)
    _write_outputs(args.out, cfg)
    tc = cfg.train()
    res = train_ensemble(train, ens, tc, dev=dev, pretrained=pretrained, log_path=args.out / "metrics.jsonl")
    save_checkpoint(model_checkpoint(res.params, ens, tc, vocab, res.optimizer.step), args.out / "model.ckpt")
    last = res.history[-1]
    print(f"trained {len(res.history)} epochs; dev WER {last['dev_wer']:.2f} -> {args.out / 'model.ckpt'}")
    return EXIT_OK


def _load_model(path: Path):
    if not path.is_file():
        raise DataError(f"model checkpoint not found: {path}")
    return model_from_checkpoint(load_checkpoint(path))


def _items(manifest, vocab, params, ens, flags, strategy):
    check_files(manifest)
    return [EvalItem(s.id, s.target, ensemble_log_probs(s.rgb, s.heatmap, params, ens, flags, strategy))
            for s in load_samples(manifest, vocab, ens.extractor)]


def cmd_eval(args) -> int:
    if (args.beam is None) != (args.alpha is None):
        raise UsageError("--beam and --alpha must be given together (or neither, for the grid search)")
    cfg = _config(args)
    if args.beam is not None:
        DecodeConfig(args.beam, args.alpha)
    params, ens, flags, vocab = _load_model(args.model)
    splits = {}
    for split in ("dev", "test"):
        path = args.data / f"{split}.tsv"
        if path.is_file():
            splits[split] = _items(read_manifest(path), vocab, params, ens, flags, cfg.strategy)
    if not splits.get("dev"):
        raise DataError(f"no dev split under {args.data}")
    alphas, beams = ((args.alpha,), (args.beam,)) if args.beam is not None else (ALPHA_GRID, BEAM_GRID)
    report = evaluate_run(splits["dev"], splits.get("test", ()), alphas, beams, cfg.denominator, vocab.decode)
    print(report.table(), end="")
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "report.txt").write_text(report.table())
        (args.out / "report.jsonl").write_text("".join(json_line(r) + "\n" for r in report.records()))
        for s in report.splits:
            write_decodes(args.out / f"decodes_{s.name}.txt", sorted(s.hypotheses.items()))
    return EXIT_OK


def cmd_decode(args) -> int:
    cfg = _config(args)
    dc = DecodeConfig(1 if args.mode == "greedy" else args.beam, args.alpha, args.mode)
    params, ens, flags, vocab = _load_model(args.model)
    items = _items(read_manifest(args.manifest), vocab, params, ens, flags, cfg.strategy)
    rows = sorted((it.id, vocab.decode(decode(it.log_probs, dc))) for it in items)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_decodes(args.out, rows)
    print(f"decoded {len(rows)} sequences -> {args.out}")
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "train": cmd_train, "eval": cmd_eval,
            "decode": cmd_decode}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, IntegrityError, IncompatibleCheckpointError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
