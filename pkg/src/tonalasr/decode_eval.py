"""Greedy and beam transducer decoding, character error rate, tone confusion, reports."""

from __future__ import annotations

import csv
import io
import json
import math
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import BLANK, ConfigError, ModelParams, encode, predict_contexts
from . import numerics as nx
from .orthography import (TONES, ParseError, ValidationError, han_to_tailo, parse_tailo, split_syllables,
                          tone_sequence)

MAX_SYMBOLS_PER_FRAME = 8


class UndefinedMetricError(ValueError):
    """CER requested against an empty reference."""


# ---------------------------------------------------------------------------
# decoding


class _Scorer:
    """Joint log-probabilities for one utterance, cached per (frame, context)."""

    def __init__(self, params: ModelParams, features):
        self.params = params
        self.enc = encode(params, features).data
        self._pred: dict[tuple[int, int], np.ndarray] = {}

    @property
    def frames(self) -> int:
        return self.enc.shape[0]

    def pred(self, ctx: tuple[int, int]) -> np.ndarray:
        vec = self._pred.get(ctx)
        if vec is None:
            vec = predict_contexts(self.params, [ctx[0]], [ctx[1]]).data[0]
            self._pred[ctx] = vec
        return vec

    def log_probs(self, t: int, ctx: tuple[int, int]) -> np.ndarray:
        p = self.params
        h = np.tanh(self.enc[t] + self.pred(ctx))
        return nx.log_softmax(nx.Tensor(h @ p["joint.weight"].data + p["joint.bias"].data, copy=False)).data


def _context(tokens: tuple[int, ...]) -> tuple[int, int]:
    padded = (BLANK, BLANK) + tokens
    return padded[-2], padded[-1]


def greedy_decode(params: ModelParams, features, max_symbols: int = MAX_SYMBOLS_PER_FRAME) -> list[int]:
    """Frame-synchronous argmax decoding.

    Ties go to blank, then to the lowest token id.  After ``max_symbols``
    emissions in one frame the decoder moves on regardless.
    """
    sc = _Scorer(params, features)
    out: list[int] = []
    for t in range(sc.frames):
        for _ in range(max_symbols):
            lp = sc.log_probs(t, _context(tuple(out[-2:])))
            k = int(np.argmax(lp))  # first maximum: blank wins ties
            if k == BLANK:
                break
            out.append(k)
    return out


@dataclass
class _Hyp:
    tokens: tuple[int, ...]
    score: float
    last: float  # log-prob of the most recent step, a tie-breaker
    order: int


def beam_decode(params: ModelParams, features, beam: int = 4,
                max_symbols: int = MAX_SYMBOLS_PER_FRAME) -> tuple[list[int], float]:
    """Beam search over transducer alignments; returns (tokens, log-score).

    Within a frame each live hypothesis either closes with blank (joining
    the set carried to the next frame, merged by log-add on identical
    labels) or emits one more token.  Closed and live hypotheses compete for
    the same ``beam`` slots.  With ``beam=1`` this is exactly greedy search.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    sc = _Scorer(params, features)
    carried = [_Hyp((), 0.0, 0.0, 0)]
    for t in range(sc.frames):
        closed: dict[tuple[int, ...], _Hyp] = {}
        live = carried
        counter = 0
        for step in range(max_symbols + 1):
            if not live:
                break
            if step == max_symbols:
                for h in live:
                    _merge(closed, _Hyp(h.tokens, h.score, h.last, h.order))
                break
            emits: dict[tuple[int, ...], _Hyp] = {}
            for h in live:
                lp = sc.log_probs(t, _context(h.tokens[-2:]))
                counter += 1
                _merge(closed, _Hyp(h.tokens, h.score + lp[BLANK], lp[BLANK], counter))
                # only the best `beam` tokens of each hypothesis can survive pruning
                cand = np.argsort(-lp[1:], kind="stable")[:beam] + 1
                for k in cand:
                    counter += 1
                    _merge(emits, _Hyp(h.tokens + (int(k),), h.score + lp[k], lp[k], counter))
            pool = [(h, True) for h in closed.values()] + [(h, False) for h in emits.values()]
            pool.sort(key=lambda e: (-e[0].score, -e[0].last, e[0].order))
            kept = pool[:beam]
            closed = {h.tokens: h for h, is_closed in kept if is_closed}
            live = [h for h, is_closed in kept if not is_closed]
        carried = sorted(closed.values(), key=lambda h: (-h.score, -h.last, h.order))
    best = carried[0]
    return list(best.tokens), best.score


def _merge(pool: dict, h: _Hyp) -> None:
    old = pool.get(h.tokens)
    if old is None:
        pool[h.tokens] = h
    else:
        keep = old if (old.score, old.last) >= (h.score, h.last) else h
        pool[h.tokens] = _Hyp(h.tokens, float(np.logaddexp(old.score, h.score)), keep.last,
                              min(old.order, h.order))


def decode_text(params: ModelParams, features, tokenizer, beam: int = 1) -> str:
    ids = greedy_decode(params, features) if beam == 1 else beam_decode(params, features, beam)[0]
    return tokenizer.decode(ids)


def write_hypotheses(path, records: Iterable[tuple[str, str]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for uid, text in records:
            fh.write(json.dumps({"id": uid, "hyp_text": text}, ensure_ascii=False) + "\n")


def read_hypotheses(path) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out[rec["id"]] = rec["hyp_text"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{n}: malformed hypothesis record ({exc})") from None
    return out


# ---------------------------------------------------------------------------
# character error rate


@dataclass
class AlignmentStats:
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0
    correct: int = 0
    ops: list[tuple[str, str | None, str | None]] = field(default_factory=list)

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def ref_length(self) -> int:
        return self.substitutions + self.deletions + self.correct


def align(ref: Sequence, hyp: Sequence) -> AlignmentStats:
    """Minimum edit alignment; among optimal backtraces prefer match/sub, then deletion, then insertion."""
    n, m = len(ref), len(hyp)
    d = [[0] * (m + 1) for _ in range(n + 1)]
    d[0] = list(range(m + 1))
    for i in range(1, n + 1):
        prev, row = d[i - 1], d[i]
        row[0] = i
        for j in range(1, m + 1):
            row[j] = min(prev[j - 1] + (ref[i - 1] != hyp[j - 1]), prev[j] + 1, row[j - 1] + 1)
    stats = AlignmentStats()
    i, j = n, m
    ops = []
    while i or j:
        if i and j and d[i][j] == d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            if ref[i - 1] == hyp[j - 1]:
                stats.correct += 1
                ops.append(("match", ref[i - 1], hyp[j - 1]))
            else:
                stats.substitutions += 1
                ops.append(("sub", ref[i - 1], hyp[j - 1]))
            i, j = i - 1, j - 1
        elif i and d[i][j] == d[i - 1][j] + 1:
            stats.deletions += 1
            ops.append(("del", ref[i - 1], None))
            i -= 1
        else:
            stats.insertions += 1
            ops.append(("ins", None, hyp[j - 1]))
            j -= 1
    stats.ops = ops[::-1]
    return stats


def _chars(text: str) -> list[str]:
    return list(unicodedata.normalize("NFC", text))


def cer(ref: str, hyp: str) -> tuple[float, AlignmentStats]:
    """Character error rate in percent over NFC code points, with its alignment."""
    r = _chars(ref)
    if not r:
        raise UndefinedMetricError("reference is empty")
    stats = align(r, _chars(hyp))
    return 100.0 * stats.errors / len(r), stats


def corpus_cer(pairs: Iterable[tuple[str, str]]) -> float:
    """Total edits over total reference characters, in percent."""
    errors = chars = 0
    for ref, hyp in pairs:
        r = _chars(ref)
        stats = align(r, _chars(hyp))
        errors += stats.errors
        chars += len(r)
    if chars == 0:
        raise UndefinedMetricError("references are empty")
    return 100.0 * errors / chars


def relative_reduction(baseline: float, model: float) -> float:
    """Baseline CER minus model CER, in percentage points."""
    return baseline - model


# ---------------------------------------------------------------------------
# tone confusion


@dataclass
class ToneConfusion:
    labels: tuple[int, ...]
    counts: np.ndarray

    @property
    def normalized(self) -> np.ndarray:
        """Row-stochastic matrix; rows without events are NaN."""
        rows = self.counts.sum(axis=1, keepdims=True).astype(np.float64)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(rows > 0, self.counts / rows, np.nan)


def tone_confusion(refs: Sequence[str], hyps: Sequence[str], lexicon=None,
                   labels: Sequence[int] = TONES) -> ToneConfusion:
    """Count (reference tone, hypothesis tone) substitution events.

    Each pair's tone sequences are aligned with the edit alignment, tones as
    symbols; matches, insertions and deletions add nothing.  Pass ``lexicon``
    when the texts are Han characters; they are romanised first.  Malformed
    hypothesis syllables are skipped, malformed references raise.
    """
    if len(refs) != len(hyps):
        raise ValueError(f"{len(refs)} references but {len(hyps)} hypotheses")
    labels = tuple(labels)
    index = {t: i for i, t in enumerate(labels)}
    counts = np.zeros((len(labels), len(labels)), dtype=np.int64)
    for n, (ref, hyp) in enumerate(zip(refs, hyps)):
        if lexicon is not None:
            ref, hyp = han_to_tailo(ref, lexicon), han_to_tailo(hyp, lexicon)
        try:
            r_tones = tone_sequence(ref, permissive=True)
        except (ParseError, ValidationError) as exc:
            raise type(exc)(f"reference {n}: {exc}") from None
        stats = align(r_tones, _lenient_tones(hyp))
        for op, a, b in stats.ops:
            if op == "sub" and a in index and b in index:
                counts[index[a], index[b]] += 1
    return ToneConfusion(labels, counts)


def _lenient_tones(text: str) -> list[int]:
    out = []
    for tok in split_syllables(text):
        try:
            out.append(parse_tailo(tok, permissive=True).tone)
        except (ParseError, ValidationError):
            continue
    return out


# ---------------------------------------------------------------------------
# reports

REL_FOOTNOTE = "Rel. = baseline CER minus model CER (absolute percentage points, not a ratio)."


def results_rows(results: dict[str, dict[str, float]], baseline: str, splits: Sequence[str]) -> list[list[str]]:
    """Table rows: model, then CER and Rel. per split; the baseline's Rel. is blank."""
    if baseline not in results:
        raise ConfigError(f"baseline {baseline!r} missing from results")
    header = ["model"]
    for s in splits:
        header += [f"{s}_cer", f"{s}_rel"]
    rows = [header]
    for name, cers in results.items():
        row = [name]
        for s in splits:
            row.append(f"{cers[s]:.2f}")
            row.append("" if name == baseline else f"{relative_reduction(results[baseline][s], cers[s]):.2f}")
        rows.append(row)
    return rows


def _csv_text(rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerows(rows)
    return buf.getvalue()


def _aligned_text(rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(str(r[c])) for r in rows) for c in range(len(rows[0]))]
    lines = ["  ".join(str(v).rjust(w) if k else str(v).ljust(w) for k, (v, w) in enumerate(zip(r, widths))).rstrip()
             for r in rows]
    return "\n".join(lines) + "\n"


def emit_report(results: dict[str, dict[str, float]], baseline: str, splits: Sequence[str], out_dir,
                name: str = "results") -> tuple[Path, Path]:
    """Write ``name``.csv and ``name``.txt (aligned table plus the Rel. footnote)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = results_rows(results, baseline, splits)
    csv_path, txt_path = out / f"{name}.csv", out / f"{name}.txt"
    csv_path.write_text(_csv_text(rows), encoding="utf-8")
    txt_path.write_text(_aligned_text(rows) + "\n" + REL_FOOTNOTE + "\n", encoding="utf-8")
    return csv_path, txt_path


def confusion_rows(conf: ToneConfusion, normalized: bool = False) -> list[list[str]]:
    mat = conf.normalized if normalized else conf.counts
    rows = [["ref\\hyp"] + [str(t) for t in conf.labels]]
    for t, row in zip(conf.labels, mat):
        if normalized:
            rows.append([str(t)] + ["" if math.isnan(v) else f"{v:.4f}" for v in row])
        else:
            rows.append([str(t)] + [str(int(v)) for v in row])
    return rows


def emit_confusion(conf: ToneConfusion, out_dir, name: str = "tone_confusion") -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    counts_path, norm_path = out / f"{name}_counts.csv", out / f"{name}.csv"
    counts_path.write_text(_csv_text(confusion_rows(conf)), encoding="utf-8")
    norm_path.write_text(_csv_text(confusion_rows(conf, normalized=True)), encoding="utf-8")
    return counts_path, norm_path
