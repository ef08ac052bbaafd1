"""Toy tonal language with two orthographies and synthetic acoustic frames.

Every syllable contributes a few frames made of a fixed random "phoneme"
vector for its toneless base syllable, followed by two pitch dimensions
(contour value and slope) taken from its tone template, plus Gaussian noise.
A related source language shares part of the phoneme table, uses four tones
and has its own lexicon; it stands in for the pretraining language.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import ConfigError, Utterance
from .orthography import TailoSyllable, render_tailo

logger = logging.getLogger(__name__)

FEATURE_MAGIC = b"CLFF"
FEATURE_VERSION = 1

# (time, value) control points in [0, 1]
TONE_CONTOURS: dict[int, tuple[tuple[float, float], ...]] = {
    1: ((0.0, 0.85), (1.0, 0.85)),              # high level
    2: ((0.0, 0.30), (1.0, 0.95)),              # rising
    3: ((0.0, 0.55), (1.0, 0.10)),              # low falling
    4: ((0.0, 0.25), (1.0, 0.20)),              # short low
    5: ((0.0, 0.45), (0.5, 0.15), (1.0, 0.65)),  # dipping then rising
    7: ((0.0, 0.55), (1.0, 0.55)),              # mid level
    8: ((0.0, 0.95), (1.0, 0.70)),              # short high
}
TARGET_TONES = (1, 2, 3, 4, 5, 7, 8)
SOURCE_TONES = (1, 2, 3, 5)


class FeatureFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ToyLanguageSpec:
    initials: tuple[str, ...] = ("p", "t", "k", "b", "g", "m", "n", "l", "s", "h", "ts", "")
    open_finals: tuple[str, ...] = ("a", "i", "u", "e", "o", "ai", "au", "an", "ang", "ong")
    checked_finals: tuple[str, ...] = ("ap", "at", "ak", "ah", "ok", "ih")
    num_base_syllables: int = 40
    lexicon_size: int = 48
    max_word_syllables: int = 3
    words_per_utterance: tuple[int, int] = (2, 6)
    zipf_exponent: float = 0.8
    homophone_rate: float = 0.3
    han_ambiguity: float = 0.15
    frames_per_syllable: tuple[int, int] = (4, 8)
    feature_dim: int = 16
    noise_sigma: float = 0.1
    speaker_pitch_sigma: float = 0.0
    num_speakers: int = 24
    tones: tuple[int, ...] = TARGET_TONES
    han_block: int = 0x4E00
    seed: int = 0


@dataclass
class ToyLanguage:
    spec: ToyLanguageSpec
    phoneme_table: dict[str, np.ndarray]
    words: list[list[TailoSyllable]]
    han_forms: list[list[str]]
    word_weights: np.ndarray
    speaker_offsets: np.ndarray = field(repr=False, default=None)

    def tailo(self, word: int) -> str:
        return "-".join(render_tailo(s) for s in self.words[word])

    def lexicon(self) -> dict[str, str]:
        """Han -> Tai-lo, whole words plus single characters (first reading wins)."""
        out: dict[str, str] = {}
        for w, forms in enumerate(self.han_forms):
            for form in forms:
                out.setdefault(form, self.tailo(w))
        for w, forms in enumerate(self.han_forms):
            for form in forms:
                for ch, syl in zip(form, self.words[w]):
                    out.setdefault(ch, render_tailo(syl))
        return out

    def mapping(self) -> dict[str, str]:
        """Tai-lo word -> primary Han form."""
        return {self.tailo(w): forms[0] for w, forms in enumerate(self.han_forms)}


def contour(tone: int, frames: int) -> tuple[np.ndarray, np.ndarray]:
    """Pitch values and halved slopes of the piecewise-linear template at ``frames`` points."""
    pts = np.array(TONE_CONTOURS[tone])
    x = np.linspace(0.0, 1.0, frames)
    pitch = np.interp(x, pts[:, 0], pts[:, 1])
    seg = np.clip(np.searchsorted(pts[:, 0], x, side="right") - 1, 0, len(pts) - 2)
    slope = (pts[seg + 1, 1] - pts[seg, 1]) / (pts[seg + 1, 0] - pts[seg, 0])
    return pitch, 0.5 * slope


def _all_bases(spec: ToyLanguageSpec) -> list[tuple[str, str]]:
    return [(i, f) for i in spec.initials for f in spec.open_finals + spec.checked_finals]


def phoneme_table(spec: ToyLanguageSpec) -> dict[str, np.ndarray]:
    rng = np.random.default_rng([spec.seed, 1])
    bases = _all_bases(spec)
    vecs = rng.standard_normal((len(bases), spec.feature_dim - 2)) / np.sqrt(spec.feature_dim - 2) * 2.0
    return {i + f: vecs[k] for k, (i, f) in enumerate(bases)}


def build_language(spec: ToyLanguageSpec, table: dict[str, np.ndarray] | None = None,
                   stream: int = 2) -> ToyLanguage:
    """Sample the syllable inventory, lexicon and Han map for ``spec``."""
    if spec.feature_dim < 3:
        raise ConfigError("feature_dim must leave room for the two pitch dims")
    lo, hi = spec.words_per_utterance
    if not 1 <= lo <= hi:
        raise ConfigError(f"words_per_utterance must satisfy 1 <= min <= max, got {spec.words_per_utterance}")
    bases = _all_bases(spec)
    open_tones = [t for t in spec.tones if t not in (4, 8)]
    checked_tones = [t for t in spec.tones if t in (4, 8)]
    if not checked_tones:
        bases = [b for b in bases if b[1] in spec.open_finals]
    if spec.num_base_syllables > len(bases):
        raise ConfigError(f"inventory has {len(bases)} base syllables, {spec.num_base_syllables} requested")
    rng = np.random.default_rng([spec.seed, stream])
    chosen = [bases[k] for k in sorted(rng.choice(len(bases), spec.num_base_syllables, replace=False))]
    toned = []
    for ini, fin in chosen:
        tones = checked_tones if fin in spec.checked_finals else open_tones
        toned += [TailoSyllable(ini, fin, t) for t in tones]
    if spec.lexicon_size > len(toned) ** spec.max_word_syllables // 2:
        raise ConfigError("syllable inventory too small for lexicon_size")

    # homophones: each toned syllable owns one or two characters
    next_char = spec.han_block
    chars: dict[TailoSyllable, list[str]] = {}
    for syl in toned:
        n = 2 if rng.random() < spec.homophone_rate else 1
        chars[syl] = [chr(next_char + k) for k in range(n)]
        next_char += n

    words, han_forms, seen = [], [], set()
    while len(words) < spec.lexicon_size:
        n = int(rng.integers(1, spec.max_word_syllables + 1))
        word = [toned[k] for k in rng.choice(len(toned), n)]
        key = tuple(word)
        if key in seen:
            continue
        form = "".join(chars[s][int(rng.integers(len(chars[s])))] for s in word)
        if any(form in f for f in han_forms):
            continue
        seen.add(key)
        words.append(word)
        han_forms.append([form])
    for w in range(len(words)):
        if rng.random() < spec.han_ambiguity:
            pos = int(rng.integers(len(words[w])))
            alt = han_forms[w][0][:pos] + chr(next_char) + han_forms[w][0][pos + 1:]
            next_char += 1
            han_forms[w].append(alt)

    ranks = rng.permutation(len(words))
    weights = 1.0 / (ranks + 1.0) ** spec.zipf_exponent
    offsets = rng.normal(0.0, spec.speaker_pitch_sigma, spec.num_speakers)
    return ToyLanguage(spec, table if table is not None else phoneme_table(spec),
                       words, han_forms, weights / weights.sum(), offsets)


def tone_separability(spec: ToyLanguageSpec, n: int = 1000, seed: int = 0) -> float:
    """Accuracy of a nearest-template tone classifier on noisy pitch frames."""
    rng = np.random.default_rng(seed)
    lo, hi = spec.frames_per_syllable
    correct = 0
    for _ in range(n):
        tone = spec.tones[int(rng.integers(len(spec.tones)))]
        frames = _frame_count(tone, lo, hi, rng)
        pitch, slope = contour(tone, frames)
        obs = np.stack([pitch, slope], 1) + rng.normal(0, spec.noise_sigma, (frames, 2))
        dists = {t: np.sum((obs - np.stack(contour(t, frames), 1)) ** 2) for t in spec.tones}
        correct += min(dists, key=dists.get) == tone
    return correct / n


def _frame_count(tone: int, lo: int, hi: int, rng) -> int:
    if tone in (4, 8):
        return int(rng.integers(lo, lo + 2))
    return int(rng.integers(lo, hi + 1))


def synthesize(lang: ToyLanguage, word_ids: Sequence[int], speaker: int,
               rng: np.random.Generator) -> np.ndarray:
    spec = lang.spec
    lo, hi = spec.frames_per_syllable
    rows = []
    for w in word_ids:
        for syl in lang.words[w]:
            frames = _frame_count(syl.tone, lo, hi, rng)
            pitch, slope = contour(syl.tone, frames)
            block = np.empty((frames, spec.feature_dim))
            block[:, :-2] = lang.phoneme_table[syl.base]
            block[:, -2] = pitch + lang.speaker_offsets[speaker]
            block[:, -1] = slope
            rows.append(block)
    feats = np.concatenate(rows)
    if spec.noise_sigma > 0:
        feats = feats + rng.normal(0.0, spec.noise_sigma, feats.shape)
    return feats


def write_features(path, feats: np.ndarray) -> None:
    T, d = feats.shape
    header = FEATURE_MAGIC + struct.pack("<III", FEATURE_VERSION, T, d)
    Path(path).write_bytes(header + np.asarray(feats, dtype="<f4").tobytes())


def read_features(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != FEATURE_MAGIC or len(raw) < 16:
        raise FeatureFormatError(f"{path}: bad magic")
    version, T, d = struct.unpack_from("<III", raw, 4)
    if version != FEATURE_VERSION:
        raise FeatureFormatError(f"{path}: version {version}, expected {FEATURE_VERSION}")
    if len(raw) != 16 + 4 * T * d:
        raise FeatureFormatError(f"{path}: expected {T}x{d} floats, file has {len(raw) - 16} payload bytes")
    return np.frombuffer(raw, dtype="<f4", offset=16).reshape(T, d).astype(np.float64)


def _sample_utterance(lang: ToyLanguage, rng) -> tuple[list[int], str, str]:
    lo, hi = lang.spec.words_per_utterance
    n = int(rng.integers(lo, hi + 1))
    ids = [int(w) for w in rng.choice(len(lang.words), n, p=lang.word_weights)]
    tailo = " ".join(lang.tailo(w) for w in ids)
    han = "".join(lang.han_forms[w][int(rng.integers(len(lang.han_forms[w])))] for w in ids)
    return ids, tailo, han


def _split_speakers(num_speakers: int, rng) -> dict[str, np.ndarray]:
    perm = rng.permutation(num_speakers)
    n_eval = max(1, num_speakers // 6)
    return {"train": perm[2 * n_eval:], "dev": perm[:n_eval], "test": perm[n_eval:2 * n_eval]}


def generate(lang: ToyLanguage, sizes: dict[str, int], out_dir, prefix: str = "") -> dict[str, Path]:
    """Write feature files and one manifest per split; returns manifest paths."""
    out = Path(out_dir)
    (out / "feats").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([lang.spec.seed, 3])
    speakers = _split_speakers(lang.spec.num_speakers, rng)
    manifests = {}
    for split in ("train", "dev", "test"):
        if sizes.get(split, 0) < 1:
            raise ConfigError(f"split {split} needs at least one utterance")
        records = []
        for i in range(sizes[split]):
            utt_id = f"{prefix}{split}-{i:05d}"
            speaker = int(speakers[split][i % len(speakers[split])])
            ids, tailo, han = _sample_utterance(lang, rng)
            feats = synthesize(lang, ids, speaker, rng)
            rel = f"feats/{utt_id}.clff"
            write_features(out / rel, feats)
            records.append({"id": utt_id, "feature_path": rel, "tailo_text": tailo,
                            "han_text": han, "num_frames": int(feats.shape[0]),
                            "speaker": f"spk{speaker:03d}"})
        path = out / f"{prefix}{split}.jsonl"
        write_manifest(path, records)
        manifests[split] = path
    logger.info("wrote %s utterances under %s", sizes, out)
    return manifests


def write_manifest(path, records: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")


def read_manifest(path) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            if "id" not in rec:
                raise ValueError(f"{path}:{lineno}: record has no id")
            records.append(rec)
    ids = [r["id"] for r in records]
    if len(set(ids)) != len(ids):
        raise ValueError(f"{path}: duplicate utterance ids")
    return records


def load_utterances(path) -> list[Utterance]:
    """Manifest records with their feature files, paths relative to the manifest."""
    base = Path(path).parent
    out = []
    for rec in read_manifest(path):
        feats = read_features(base / rec["feature_path"])
        if "num_frames" in rec and feats.shape[0] != rec["num_frames"]:
            raise FeatureFormatError(f"{rec['id']}: manifest says {rec['num_frames']} frames, file has {feats.shape[0]}")
        out.append(Utterance(rec["id"], feats, rec.get("tailo_text", ""), rec.get("han_text", "")))
    return out


def write_tsv(path, mapping: dict[str, str], header: str) -> None:
    lines = [f"# {header}"] + [f"{k}\t{v}" for k, v in mapping.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def gen_corpus(spec: ToyLanguageSpec, sizes: dict[str, int], out_dir) -> dict[str, Path]:
    """Target-language corpus plus its lexicon (Han -> Tai-lo) and mapping table."""
    lang = build_language(spec)
    manifests = generate(lang, sizes, out_dir)
    write_tsv(Path(out_dir) / "lexicon.tsv", lang.lexicon(), "Han\tTai-lo")
    write_tsv(Path(out_dir) / "mapping.tsv", lang.mapping(), "Tai-lo\tHan")
    return manifests


def source_spec(spec: ToyLanguageSpec) -> ToyLanguageSpec:
    """Four open tones, its own lexicon and character block."""
    return replace(spec, tones=SOURCE_TONES, han_block=spec.han_block + 0x1000, seed=spec.seed + 7919)


def source_phoneme_table(spec: ToyLanguageSpec, overlap: float) -> dict[str, np.ndarray]:
    """Share a fraction ``overlap`` of the target phoneme rows; redraw the rest."""
    if not 0.0 <= overlap <= 1.0:
        raise ConfigError(f"overlap must be in [0, 1], got {overlap}")
    target = phoneme_table(spec)
    keys = list(target)
    rng = np.random.default_rng([spec.seed, 4])
    shared = set(rng.permutation(len(keys))[:int(round(overlap * len(keys)))].tolist())
    fresh = rng.standard_normal((len(keys), spec.feature_dim - 2)) / np.sqrt(spec.feature_dim - 2) * 2.0
    return {k: (target[k] if i in shared else fresh[i]) for i, k in enumerate(keys)}


def gen_source_corpus(spec: ToyLanguageSpec, overlap: float, sizes: dict[str, int], out_dir) -> dict[str, Path]:
    src = source_spec(spec)
    lang = build_language(src, source_phoneme_table(spec, overlap))
    return generate(lang, sizes, out_dir, prefix="source-")
