"""Command-line entry point: ``tonalasr <command> [options]``.

Exit status: 0 success, 1 invalid input or configuration, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import unicodedata
from pathlib import Path

from . import decode_eval as de
from . import experiment as ex
from . import synth_corpus as sc
from . import training as tr
from .config import ConfigError, RunConfig, flag_specs
from .model import load_checkpoint, save_checkpoint
from .orthography import MappingTable, NormalizationReport, load_tsv, normalize_text
from .tokenizer import BpeModel

logger = logging.getLogger("tonalasr")

LABEL_FIELD = {"pretrain": "tailo_text", "stage1": "tailo_text", "stage2": "han_text", "direct": "han_text"}


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("configuration")
    g.add_argument("--config", type=Path, help="sectioned config file; flags below override it")
    g.add_argument("--seed", dest="run.seed", metavar="N", default=argparse.SUPPRESS,
                   help="single seed for corpus, init and shuffling (config: run.seed)")
    for key, default in flag_specs():
        if key == "run.seed":
            continue
        g.add_argument(f"--{key}", dest=key, metavar="V", default=argparse.SUPPRESS,
                       help=f"default {default!r} (config: {key})")
    g.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="tonalasr", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate the target and source corpora")
    p.add_argument("--out", type=Path, help="output directory (default: run.run_dir)")

    p = sub.add_parser("bpe-train", parents=[common], help="train the byte-level BPE model")
    p.add_argument("--manifest", type=Path, nargs="+", required=True, help="manifests whose transcripts are used")
    p.add_argument("--out", type=Path, required=True, help="model file to write")

    p = sub.add_parser("train", parents=[common], help="run one training stage")
    p.add_argument("--stage", choices=tr.STAGES, required=True)
    p.add_argument("--train", type=Path, required=True, help="training manifest")
    p.add_argument("--tokenizer", type=Path, required=True, help="BPE model file")
    p.add_argument("--init", type=Path, help="checkpoint to start from (required for stage2)")
    p.add_argument("--freeze", nargs="*", choices=("encoder", "prediction", "joint"),
                   help="components kept fixed (config: train.freeze)")
    p.add_argument("--out", type=Path, required=True, help="checkpoint to write")
    p.add_argument("--log", type=Path, help="append per-epoch JSON lines here")

    p = sub.add_parser("decode", parents=[common], help="decode a manifest to a hypothesis file")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--tokenizer", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--beam", type=int, dest="decode.beam", default=argparse.SUPPRESS,
                   help="beam width, 1 is greedy (config: decode.beam)")

    p = sub.add_parser("score", parents=[common], help="character error rate of a hypothesis file")
    p.add_argument("--ref", type=Path, required=True, help="reference manifest")
    p.add_argument("--hyp", type=Path, required=True, help="hypothesis JSON lines")
    p.add_argument("--field", choices=("han_text", "tailo_text"), default="han_text")
    p.add_argument("--alignment", type=Path, help="per-utterance alignment CSV")

    p = sub.add_parser("confusion", parents=[common], help="tone substitution matrices")
    p.add_argument("--ref", type=Path, required=True)
    p.add_argument("--hyp", type=Path, required=True)
    p.add_argument("--field", choices=("han_text", "tailo_text"), default="han_text")
    p.add_argument("--lexicon", type=Path, help="Han to Tai-lo TSV (needed for han_text)")
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = sub.add_parser("normalize", parents=[common], help="normalise Han/romanised text line by line")
    p.add_argument("--mapping", type=Path, required=True, help="Tai-lo to Han TSV")
    p.add_argument("--variants", type=Path, help="variant character TSV (default: bundled table)")
    p.add_argument("--input", type=Path, help="input text file (default: stdin)")
    p.add_argument("--output", type=Path, help="output file (default: stdout)")

    p = sub.add_parser("report", parents=[common], help="results table and tone confusions for a run directory")
    p.add_argument("--run-dir", type=Path, help="default: run.run_dir")
    p.add_argument("--baseline", default=ex.BASELINE)

    p = sub.add_parser("experiment", parents=[common], help="full pipeline: synth to report")
    p.add_argument("--run-dir", type=Path, help="default: run.run_dir")
    return parser


def _load_config(args) -> RunConfig:
    overrides = {k: v for k, v in vars(args).items() if "." in k}
    if getattr(args, "freeze", None) is not None:
        overrides["train.freeze"] = " ".join(args.freeze)
    return RunConfig.load(args.config, {k: str(v) for k, v in overrides.items()})


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def cmd_synth(cfg, args):
    out = args.out or cfg.run_dir
    ex.synthesize_corpora(cfg, Path(out))
    print(f"wrote corpora under {out}")


def cmd_bpe_train(cfg, args):
    tok = ex.train_tokenizer([_require(m, "manifest") for m in args.manifest],
                             cfg.get("tokenizer.vocab_size"), args.out)
    print(f"wrote {args.out} ({tok.vocab_size} tokens)")


def cmd_train(cfg, args):
    tok = BpeModel.load(_require(args.tokenizer, "tokenizer"))
    if args.stage == "stage2" and args.init is None:
        raise ConfigError("stage2 needs --init pointing at the stage-1 checkpoint")
    if args.init is not None:
        params = load_checkpoint(_require(args.init, "init checkpoint"))
        if params.stage == "pretrain" and args.stage in ("stage1", "direct"):
            params = tr.transfer_encoder(params, cfg.seed)
    else:
        params = ex.random_init(cfg, tok.vocab_size)
    tc = cfg.train_config()
    if args.stage != "stage1" and tc.freeze:
        logger.warning("freezing applies to stage1 only; ignoring for %s", args.stage)
        tc = cfg.train_config(freeze=())
    data = tr.Dataset(sc.load_utterances(_require(args.train, "manifest")), LABEL_FIELD[args.stage], tc.max_frames)
    result = tr.train_stage(params, data, tok, tc, args.stage, args.log)
    save_checkpoint(result.params, args.out, args.stage)
    print(f"{args.stage}: final loss {result.log[-1]['mean_loss']:.4f}, wrote {args.out}")


def cmd_decode(cfg, args):
    params = load_checkpoint(_require(args.ckpt, "checkpoint"))
    tok = BpeModel.load(_require(args.tokenizer, "tokenizer"))
    if tok.vocab_size != params.config.vocab_size:
        raise ConfigError(f"tokenizer has {tok.vocab_size} tokens, checkpoint expects {params.config.vocab_size}")
    hyps = ex.decode_manifest(params, _require(args.manifest, "manifest"), tok, args.out,
                              cfg.get("decode.beam"), cfg.get("decode.max_symbols"))
    print(f"decoded {len(hyps)} utterances to {args.out}")


def _printable(text: str) -> str:
    """Control characters (untrained models can emit NUL) as backslash escapes."""
    return "".join(ch.encode("unicode_escape").decode("ascii") if unicodedata.category(ch) == "Cc" else ch
                   for ch in text)


def cmd_score(cfg, args):
    refs = sc.read_manifest(_require(args.ref, "reference manifest"))
    hyps = de.read_hypotheses(_require(args.hyp, "hypothesis file"))
    missing = [r["id"] for r in refs if r["id"] not in hyps]
    if missing:
        raise ValueError(f"{len(missing)} reference ids have no hypothesis (first: {missing[0]})")
    value = de.corpus_cer((r[args.field], hyps[r["id"]]) for r in refs)
    if args.alignment:
        with open(args.alignment, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "ref", "hyp", "S", "D", "I", "C"])
            for r in refs:
                stats = de.cer(r[args.field], hyps[r["id"]])[1]
                w.writerow([r["id"], _printable(r[args.field]), _printable(hyps[r["id"]]),
                            stats.substitutions, stats.deletions,
                            stats.insertions, stats.correct])
    print(f"CER {value:.2f}%")


def cmd_confusion(cfg, args):
    refs = sc.read_manifest(_require(args.ref, "reference manifest"))
    hyps = de.read_hypotheses(_require(args.hyp, "hypothesis file"))
    lexicon = None
    if args.field == "han_text":
        if args.lexicon is None:
            raise ConfigError("--lexicon is required to romanise han_text")
        lexicon = dict(load_tsv(_require(args.lexicon, "lexicon")))
    conf = de.tone_confusion([r[args.field] for r in refs], [hyps.get(r["id"], "") for r in refs], lexicon)
    paths = de.emit_confusion(conf, args.out)
    print(f"{int(conf.counts.sum())} tone substitutions; wrote {', '.join(map(str, paths))}")


def cmd_normalize(cfg, args):
    table = MappingTable.from_tsv(_require(args.mapping, "mapping table"), args.variants)
    text = args.input.read_text(encoding="utf-8") if args.input else sys.stdin.read()
    report = NormalizationReport()
    out = "".join(normalize_text(line, table, report) + "\n" for line in text.splitlines())
    if args.output:
        args.output.write_text(out, encoding="utf-8")
    else:
        sys.stdout.write(out)
    for seg, n in sorted(report.unknown_segments.items()):
        logger.warning("unmapped romanised segment %r (%d)", seg, n)


def _print_results(results):
    for name, cers in results.items():
        print(name, " ".join(f"{s}={v:.2f}" for s, v in cers.items()))


def cmd_report(cfg, args):
    run_dir = args.run_dir or cfg.run_dir
    _print_results(ex.build_report(cfg, _require(Path(run_dir), "run directory"), args.baseline))


def cmd_experiment(cfg, args):
    _print_results(ex.run_pipeline(cfg, args.run_dir or cfg.run_dir))


COMMANDS = {"synth": cmd_synth, "bpe-train": cmd_bpe_train, "train": cmd_train, "decode": cmd_decode,
            "score": cmd_score, "confusion": cmd_confusion, "normalize": cmd_normalize,
            "report": cmd_report, "experiment": cmd_experiment}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args)
        COMMANDS[args.command](cfg, args)
    except (ValueError, LookupError, OSError) as exc:
        # bad configuration, malformed or missing inputs
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - anything else is a runtime failure
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
