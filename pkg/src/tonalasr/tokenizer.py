"""Byte-level BPE shared by the romanised and the character transcripts.

Token ids: ``0`` is reserved (blank / context start), ``1..256`` are the raw
bytes ``0x00..0xff``, and merged tokens follow in training order.

Text is first cut into pieces (a letter run, a digit run or a punctuation
run, each with at most one leading space; or a whitespace run) and merges
never cross piece boundaries.  Whitespace stays an ordinary byte.  Tone
digits therefore remain separate from syllable letters and from the spaces
and hyphens around them.
"""

from __future__ import annotations

import logging
import re
from collections import Counter
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

logger = logging.getLogger(__name__)

HEADER = "clft-bpe v1"
NUM_BYTES = 256

# letters, digits, punctuation (with "_"), then whitespace; the pieces concatenate back to the input
PIECE = re.compile(r" ?[^\W\d_]+| ?\d+| ?(?:[^\s\w]|_)+|\s+(?!\S)|\s+")


def pieces(text: str) -> list[str]:
    return PIECE.findall(text)


class TrainingError(ValueError):
    pass


class FormatError(ValueError):
    pass


def _merge_pair(seq: list, pair: tuple, new) -> list:
    out = []
    i = 0
    n = len(seq)
    while i < n:
        if i + 1 < n and seq[i] == pair[0] and seq[i + 1] == pair[1]:
            out.append(new)
            i += 2
        else:
            out.append(seq[i])
            i += 1
    return out


class BpeModel:
    """Ordered merge list plus the derived id <-> bytes table."""

    def __init__(self, merges: Sequence[tuple[bytes, bytes]]):
        self.merges: list[tuple[bytes, bytes]] = [(bytes(a), bytes(b)) for a, b in merges]
        self.vocab: list[bytes] = [b""] + [bytes([i]) for i in range(NUM_BYTES)]
        self._ids: dict[bytes, int] = {tok: i for i, tok in enumerate(self.vocab) if i}
        self._ranks: dict[tuple[int, int], tuple[int, int]] = {}
        for rank, (a, b) in enumerate(self.merges):
            if a not in self._ids or b not in self._ids:
                raise FormatError(f"merge {rank} uses an unknown token")
            tok = a + b
            if tok in self._ids:
                raise FormatError(f"merge {rank} duplicates token {tok!r}")
            self._ids[tok] = len(self.vocab)
            self._ranks[(self._ids[a], self._ids[b])] = (rank, len(self.vocab))
            self.vocab.append(tok)
        self._encode_cached = lru_cache(maxsize=65536)(self._encode)

    @property
    def vocab_size(self) -> int:
        """Number of real tokens; valid ids are ``1..vocab_size``."""
        return len(self.vocab) - 1

    def __eq__(self, other) -> bool:
        return isinstance(other, BpeModel) and self.merges == other.merges

    def _encode(self, text: str) -> tuple[int, ...]:
        ids = [b + 1 for b in text.encode("utf-8")]
        ranks = self._ranks
        while len(ids) > 1:
            best = None
            for pair in zip(ids, ids[1:]):
                r = ranks.get(pair)
                if r is not None and (best is None or r[0] < best[1][0]):
                    best = (pair, r)
            if best is None:
                break
            ids = _merge_pair(ids, best[0], best[1][1])
        return tuple(ids)

    def encode(self, text: str) -> list[int]:
        out: list[int] = []
        for piece in pieces(text):
            out.extend(self._encode_cached(piece))
        return out

    def decode(self, ids: Iterable[int], return_flag: bool = False):
        """Concatenate token bytes and UTF-8 decode them.

        Invalid byte sequences become U+FFFD; with ``return_flag=True`` the
        result is ``(text, valid)``.
        """
        chunks = []
        for i in ids:
            if not 1 <= i < len(self.vocab):
                raise IndexError(f"token id {i} outside [1, {self.vocab_size}]")
            chunks.append(self.vocab[i])
        raw = b"".join(chunks)
        try:
            text, valid = raw.decode("utf-8"), True
        except UnicodeDecodeError:
            text, valid = raw.decode("utf-8", errors="replace"), False
        return (text, valid) if return_flag else text

    def save(self, path) -> None:
        lines = [f"{HEADER} {self.vocab_size}"]
        lines += [f"{a.hex()}\t{b.hex()}" for a, b in self.merges]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "BpeModel":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or not lines[0].startswith(HEADER + " "):
            raise FormatError(f"{path}: missing '{HEADER}' header")
        try:
            declared = int(lines[0].split()[-1])
            merges = []
            for line in lines[1:]:
                if line.strip():
                    a, b = line.split("\t")
                    merges.append((bytes.fromhex(a), bytes.fromhex(b)))
        except ValueError as exc:
            raise FormatError(f"{path}: malformed merge line ({exc})") from None
        model = cls(merges)
        if model.vocab_size != declared:
            raise FormatError(f"{path}: header declares {declared} tokens, merges give {model.vocab_size}")
        return model


def bpe_train(corpus: Iterable[str], target_vocab: int) -> BpeModel:
    """Learn merges until ids ``0..target_vocab-1`` are used up.

    Pair counts are taken within pieces (see :func:`pieces`).
    ``target_vocab`` counts the reserved id 0, so ``target_vocab - 257``
    merges at most.  Training stops early once no pair occurs twice.  Ties
    go to the lexicographically smallest ``(left, right)`` byte sequences.
    """
    if target_vocab < NUM_BYTES + 1:
        raise TrainingError(f"target_vocab must be >= {NUM_BYTES + 1}, got {target_vocab}")
    words: Counter = Counter()
    for line in corpus:
        words.update(pieces(line))
    if not words:
        raise TrainingError("empty corpus")
    seqs = [([bytes([b]) for b in w.encode("utf-8")], n) for w, n in sorted(words.items())]
    merges = []
    for _ in range(target_vocab - NUM_BYTES - 1):
        counts: Counter = Counter()
        for seq, n in seqs:
            for pair in zip(seq, seq[1:]):
                counts[pair] += n
        if not counts:
            break
        top = max(counts.values())
        if top < 2:
            break
        pair = min(p for p, c in counts.items() if c == top)
        merges.append(pair)
        seqs = [(_merge_pair(seq, pair, pair[0] + pair[1]), n) for seq, n in seqs]
    logger.info("trained %d merges (vocab %d)", len(merges), NUM_BYTES + len(merges))
    return BpeModel(merges)
