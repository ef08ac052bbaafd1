"""The staged-versus-direct comparison on the synthetic corpus, end to end.

Run directory layout (all under ``run_dir``)::

    corpus/{train,dev,test}.jsonl, lexicon.tsv, mapping.tsv, feats/
    source/source-{train,dev,test}.jsonl, feats/
    bpe.model
    ckpt/<method>/*.ckpt, ckpt/pretrain.ckpt
    hyps/<method>/<split>.jsonl
    report/results.{csv,txt}, report/<method>_tone_confusion*.csv, report/provenance.json
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import decode_eval as de
from . import synth_corpus as sc
from . import training as tr
from .config import RunConfig
from .model import ModelParams, init_params, load_checkpoint, save_checkpoint
from .orthography import load_tsv
from .tokenizer import BpeModel, bpe_train

logger = logging.getLogger(__name__)

METHODS = ("two_stage", "direct", "two_stage_random_init", "two_stage_frozen_encoder")
SPLITS = ("dev", "test")
BASELINE = "direct"


def synthesize_corpora(cfg: RunConfig, run_dir: Path) -> None:
    spec = cfg.corpus_spec()
    sc.gen_corpus(spec, cfg.sizes(), run_dir / "corpus")
    sc.gen_source_corpus(spec, cfg.get("corpus.source_overlap"), cfg.sizes(source=True), run_dir / "source")


def train_tokenizer(manifests, vocab_size: int, out_path: Path | None = None) -> BpeModel:
    """BPE over the romanised and Han transcripts of every given manifest."""
    texts = []
    for m in manifests:
        for rec in sc.read_manifest(m):
            texts += [rec.get("tailo_text", ""), rec.get("han_text", "")]
    tok = bpe_train([t for t in texts if t], vocab_size)
    if out_path:
        tok.save(out_path)
    return tok


def random_init(cfg: RunConfig, vocab_size: int) -> ModelParams:
    return init_params(cfg.model_config(vocab_size), np.random.default_rng([cfg.seed, 5]))


def train_methods(cfg: RunConfig, run_dir: Path, tok: BpeModel,
                  methods=METHODS) -> dict[str, ModelParams]:
    """Pretrain once, then run each requested training strategy."""
    train = sc.load_utterances(run_dir / "corpus" / "train.jsonl")
    tc = cfg.train_config(freeze=())
    rand = random_init(cfg, tok.vocab_size)
    ckpt = run_dir / "ckpt"
    pre_path = ckpt / "pretrain.ckpt"
    if pre_path.exists():
        pretrained = load_checkpoint(pre_path)
    else:
        source = tr.Dataset(sc.load_utterances(run_dir / "source" / "source-train.jsonl"),
                            "tailo_text", tc.max_frames)
        pretrained = tr.pretrain_encoder(rand, source, tok, tc)
        save_checkpoint(pretrained, pre_path, "pretrain")
    transferred = tr.transfer_encoder(pretrained, cfg.seed)
    plans = {
        "two_stage": (tr.two_stage_train, transferred, tc),
        "direct": (tr.direct_train, transferred, tc),
        "two_stage_random_init": (tr.two_stage_train, rand, tc),
        "two_stage_frozen_encoder": (tr.two_stage_train, transferred, dataclasses.replace(tc, freeze=frozenset({"encoder"}))),
    }
    out = {}
    for name in methods:
        fn, init, conf = plans[name]
        start = time.perf_counter()
        params, _ = fn(init, train, tok, conf, ckpt / name)
        logger.info("%s trained in %.1fs", name, time.perf_counter() - start)
        out[name] = params
    return out


def decode_manifest(params: ModelParams, manifest, tok: BpeModel, out_path: Path | None = None,
                    beam: int = 1, max_symbols: int = de.MAX_SYMBOLS_PER_FRAME) -> dict[str, str]:
    hyps = {}
    for utt in sc.load_utterances(manifest):
        ids = (de.greedy_decode(params, utt.features, max_symbols) if beam == 1
               else de.beam_decode(params, utt.features, beam, max_symbols)[0])
        hyps[utt.id] = tok.decode(ids)
    if out_path:
        out_path.parent.mkdir(parents=True, exist_ok=True)
        de.write_hypotheses(out_path, hyps.items())
    return hyps


def score(manifest, hyps: dict[str, str], field: str = "han_text") -> float:
    """Corpus CER (%) of hypotheses against one transcript field; missing ids count as empty output."""
    return de.corpus_cer((rec[field], hyps.get(rec["id"], "")) for rec in sc.read_manifest(manifest))


def build_report(cfg: RunConfig, run_dir: Path, baseline: str = BASELINE) -> dict[str, dict[str, float]]:
    """Results table and tone confusions from ``hyps/``; writes ``report/``."""
    hyp_root = run_dir / "hyps"
    methods = sorted(p.name for p in hyp_root.iterdir() if p.is_dir())
    if baseline not in methods:
        raise tr.ConfigError(f"baseline {baseline!r} has no hypotheses under {hyp_root}")
    order = [m for m in METHODS if m in methods] + [m for m in methods if m not in METHODS]
    results = {}
    for m in order:
        results[m] = {s: score(run_dir / "corpus" / f"{s}.jsonl", de.read_hypotheses(hyp_root / m / f"{s}.jsonl"))
                      for s in SPLITS}
    report = run_dir / "report"
    de.emit_report(results, baseline, SPLITS, report)
    lexicon = dict(load_tsv(run_dir / "corpus" / "lexicon.tsv"))
    refs = sc.read_manifest(run_dir / "corpus" / "test.jsonl")
    for m in order:
        hyps = de.read_hypotheses(hyp_root / m / "test.jsonl")
        conf = de.tone_confusion([r["han_text"] for r in refs], [hyps.get(r["id"], "") for r in refs], lexicon)
        de.emit_confusion(conf, report, f"{m}_tone_confusion")
    provenance = {"config_sha256": cfg.digest(), "seed": cfg.seed, "version": __version__,
                  "baseline": baseline, "methods": order}
    (report / "provenance.json").write_text(json.dumps(provenance, indent=2, sort_keys=True) + "\n")
    return results


def run_pipeline(cfg: RunConfig, run_dir=None, methods=METHODS) -> dict[str, dict[str, float]]:
    """synth -> bpe-train -> pretrain -> every method -> decode -> report."""
    run_dir = Path(run_dir or cfg.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.ini").write_text(cfg.to_text(), encoding="utf-8")
    synthesize_corpora(cfg, run_dir)
    tok = train_tokenizer([run_dir / "corpus" / "train.jsonl", run_dir / "source" / "source-train.jsonl"],
                          cfg.get("tokenizer.vocab_size"), run_dir / "bpe.model")
    trained = train_methods(cfg, run_dir, tok, methods)
    for name, params in trained.items():
        for split in SPLITS:
            decode_manifest(params, run_dir / "corpus" / f"{split}.jsonl", tok,
                            run_dir / "hyps" / name / f"{split}.jsonl",
                            cfg.get("decode.beam"), cfg.get("decode.max_symbols"))
    return build_report(cfg, run_dir, BASELINE if BASELINE in methods else methods[0])
