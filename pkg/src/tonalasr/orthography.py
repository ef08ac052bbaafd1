"""Tai-lo syllables, Han-Lo text normalisation and Han to tone conversion."""

from __future__ import annotations

import re
import unicodedata
import warnings
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path

TONES = (1, 2, 3, 4, 5, 7, 8)
EXTRA_TONES = (6, 9)
CHECKED_TONES = (4, 8)
UNKNOWN_SYLLABLE = "?"

# longest first so "tsh" wins over "ts"
INITIALS = ("tsh", "ts", "ph", "th", "kh", "ng", "p", "m", "b", "t", "n", "l", "k", "g", "h", "s", "j")
_VOWELS = set("aeiou")


class ParseError(ValueError):
    pass


class ValidationError(ValueError):
    """Tone number is inconsistent with the syllable's final."""


class FormatError(ValueError):
    pass


def load_tsv(path) -> list[tuple[str, str]]:
    """Two-column UTF-8 TSV; ``#`` comments and blank lines are skipped."""
    return parse_tsv(Path(path).read_text(encoding="utf-8"), str(path))


def parse_tsv(text: str, source: str = "<tsv>") -> list[tuple[str, str]]:
    rows = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.rstrip("\r")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0] or not parts[1]:
            raise FormatError(f"{source}:{lineno}: expected two non-empty tab-separated columns")
        rows.append((parts[0], parts[1]))
    return rows


def _data_text(name: str) -> str:
    return resources.files("tonalasr").joinpath("data", name).read_text(encoding="utf-8")


def data_path(name: str) -> Path:
    return Path(str(resources.files("tonalasr").joinpath("data", name)))


@lru_cache(maxsize=None)
def diacritic_table() -> dict[str, int]:
    """Combining mark -> tone number, from the shipped table."""
    return {chr(int(mark, 16)): int(tone) for mark, tone in parse_tsv(_data_text("tailo_diacritics.tsv"))}


def _is_checked(final: str) -> bool:
    return final[-1] in "ptkh"


# ---------------------------------------------------------------------------
# syllables


@dataclass(frozen=True)
class TailoSyllable:
    initial: str
    final: str
    tone: int
    raw: str = field(default="", compare=False)

    @property
    def checked(self) -> bool:
        return _is_checked(self.final)

    @property
    def base(self) -> str:
        return self.initial + self.final


def _valid_final(final: str) -> bool:
    core = final[:-1] if final.endswith("h") and len(final) > 1 else final
    return bool(final) and (bool(_VOWELS & set(final)) or core in ("m", "ng"))


def _split_initial(letters: str) -> tuple[str, str]:
    for ini in INITIALS:
        if letters.startswith(ini) and _valid_final(letters[len(ini):]):
            return ini, letters[len(ini):]
    if _valid_final(letters):
        return "", letters
    raise ParseError(f"cannot split {letters!r} into initial and final")


def check_tone(final: str, tone: int, permissive: bool = False) -> None:
    allowed = TONES + EXTRA_TONES if permissive else TONES
    if tone not in allowed:
        raise ValidationError(f"tone {tone} not in {allowed}")
    checked = _is_checked(final)
    if checked != (tone in CHECKED_TONES):
        msg = (f"final {final!r} is {'checked' if checked else 'open'} "
               f"but carries tone {tone}")
        if not permissive:
            raise ValidationError(msg)
        warnings.warn(msg, stacklevel=3)


def parse_tailo(token: str, permissive: bool = False) -> TailoSyllable:
    """Parse one syllable written with a tone digit, a diacritic, or neither.

    Unmarked syllables get tone 4 when the final is checked (-p/-t/-k/-h)
    and tone 1 otherwise.
    """
    if not token:
        raise ParseError("empty syllable")
    table = diacritic_table()
    decomposed = unicodedata.normalize("NFD", token.strip()).lower()
    digit = None
    if decomposed and decomposed[-1].isdigit():
        digit = int(decomposed[-1])
        decomposed = decomposed[:-1]
    marks = [ch for ch in decomposed if unicodedata.combining(ch)]
    letters = "".join(ch for ch in decomposed if not unicodedata.combining(ch))
    if len(marks) > 1:
        raise ParseError(f"{token!r} carries more than one tone mark")
    if marks and marks[0] not in table:
        raise ParseError(f"{token!r} has unknown mark U+{ord(marks[0]):04X}")
    if not letters or not re.fullmatch(r"[a-z]+", letters):
        raise ParseError(f"{token!r} is not a Tai-lo syllable")
    initial, final = _split_initial(letters)
    mark_tone = table[marks[0]] if marks else None
    if digit is not None and mark_tone is not None and digit != mark_tone:
        raise ParseError(f"{token!r}: digit tone {digit} conflicts with diacritic tone {mark_tone}")
    if digit is not None:
        tone = digit
    elif mark_tone is not None:
        tone = mark_tone
    else:
        tone = 4 if _is_checked(final) else 1
    check_tone(final, tone, permissive)
    return TailoSyllable(initial, final, tone, token)


def _mark_position(final: str) -> int:
    for pair, idx in (("iu", 1), ("ui", 1)):
        if pair in final and "a" not in final and "o" not in final and "e" not in final:
            return final.index(pair) + idx
    for vowel in "aoeiu":
        if vowel in final:
            return final.index(vowel)
    return 0  # syllabic m / ng


def render_tailo(syl: TailoSyllable, style: str = "digit") -> str:
    """Write a syllable with a trailing tone digit or with a diacritic."""
    if style == "digit":
        return f"{syl.initial}{syl.final}{syl.tone}"
    if style != "diacritic":
        raise ValueError(f"unknown style {style!r}")
    if syl.tone in (1, 4):
        return syl.initial + syl.final
    mark = {t: m for m, t in diacritic_table().items()}[syl.tone]
    pos = _mark_position(syl.final)
    marked = syl.final[:pos + 1] + mark + syl.final[pos + 1:]
    return unicodedata.normalize("NFC", syl.initial + marked)


def split_syllables(text: str) -> list[str]:
    return [tok for tok in re.split(r"[\s\-]+", text) if tok]


def tone_sequence(text: str, permissive: bool = False) -> list[int]:
    """Surface tones of a Tai-lo string (no sandhi); unknown markers are skipped."""
    tones = []
    for i, tok in enumerate(split_syllables(text)):
        if tok == UNKNOWN_SYLLABLE:
            continue
        try:
            tones.append(parse_tailo(tok, permissive).tone)
        except (ParseError, ValidationError) as exc:
            raise type(exc)(f"syllable {i} ({tok!r}): {exc}") from None
    return tones


# ---------------------------------------------------------------------------
# numerals

_DIGITS = "零一二三四五六七八九"
_DIGITWISE = "〇一二三四五六七八九"


def _read_group(x: int, leading: bool) -> str:
    out = []
    started = zero_pending = False
    for d, unit in zip((x // 1000, x // 100 % 10, x // 10 % 10, x % 10), ("千", "百", "十", "")):
        if d == 0:
            zero_pending = started
            continue
        if zero_pending:
            out.append("零")
            zero_pending = False
        if leading and not started and unit == "十" and d == 1:
            out.append("十")
        else:
            out.append(_DIGITS[d] + unit)
        started = True
    return "".join(out)


def chinese_numeral(n: int) -> str:
    """Positional reading of 0 <= n <= 99,999,999 (e.g. 123 -> 一百二十三)."""
    if not 0 <= n <= 99_999_999:
        raise ValueError(f"{n} outside positional range")
    if n == 0:
        return "零"
    high, low = divmod(n, 10_000)
    if not high:
        return _read_group(low, leading=True)
    s = _read_group(high, leading=True) + "萬"
    if low:
        s += ("零" if low < 1000 else "") + _read_group(low, leading=False)
    return s


def convert_digit_run(run: str) -> str:
    """Runs with a leading zero or more than eight digits are read digit by digit."""
    if (len(run) > 1 and run[0] == "0") or len(run) > 8:
        return "".join(_DIGITWISE[int(c)] for c in run)
    return chinese_numeral(int(run))


# ---------------------------------------------------------------------------
# normalisation

_LATIN = "A-Za-zÀ-ɏḀ-ỿ"
_ROMAN_RUN = re.compile(
    rf"[{_LATIN}][{_LATIN}0-9̀-ͯ]*(?:-[{_LATIN}][{_LATIN}0-9̀-ͯ]*)*")
# digits glued to a preceding letter or mark are tone numbers, not quantities
_DIGIT_RUN = re.compile(rf"(?<![{_LATIN}̀-ͯ0-9])[0-9]+")


class MappingTable:
    """Romanised segment -> Han entries plus a Han variant -> canonical map."""

    def __init__(self, entries: dict[str, str], variants: dict[str, str] | None = None):
        self.entries: dict[str, str] = {}
        for key, value in entries.items():
            folded = unicodedata.normalize("NFC", key).casefold()
            if not value:
                raise FormatError(f"empty value for {key!r}")
            if folded in self.entries:
                raise FormatError(f"duplicate key {key!r} after case folding")
            self.entries[folded] = value
        self.variants = self._resolve(variants or {})
        self.max_syllables = max((len(k.split("-")) for k in self.entries), default=0)

    @staticmethod
    def _resolve(variants: dict[str, str]) -> dict[str, str]:
        out = {}
        for src in variants:
            seen = {src}
            dst = variants[src]
            while dst in variants:
                if dst in seen:
                    raise FormatError(f"variant cycle through {dst!r}")
                seen.add(dst)
                dst = variants[dst]
            out[src] = dst
        return out

    @classmethod
    def from_tsv(cls, mapping_path=None, variants_path=None) -> "MappingTable":
        entries = {}
        if mapping_path is not None:
            for key, value in load_tsv(mapping_path):
                if key in entries:
                    raise FormatError(f"{mapping_path}: duplicate key {key!r}")
                entries[key] = value
        if variants_path is None:
            variants = dict(parse_tsv(_data_text("variants.tsv")))
        else:
            variants = dict(load_tsv(variants_path))
        return cls(entries, variants)


@dataclass
class NormalizationReport:
    unknown_segments: Counter = field(default_factory=Counter)
    replaced: int = 0
    numerals: int = 0


def _replace_romanized(run: str, table: MappingTable, report: NormalizationReport) -> str:
    sylls = run.split("-")
    folded = [s.casefold() for s in sylls]
    pieces: list[tuple[bool, str]] = []
    i = 0
    while i < len(sylls):
        for k in range(min(table.max_syllables, len(sylls) - i), 0, -1):
            han = table.entries.get("-".join(folded[i:i + k]))
            if han is not None:
                pieces.append((True, han))
                report.replaced += 1
                i += k
                break
        else:
            pieces.append((False, sylls[i]))
            report.unknown_segments[sylls[i]] += 1
            i += 1
    out = pieces[0][1]
    for (prev_han, _), (han, text) in zip(pieces, pieces[1:]):
        out += text if (prev_han or han) else "-" + text
    return out


def normalize_text(text: str, table: MappingTable, report: NormalizationReport | None = None) -> str:
    """Romanised segments -> Han, Arabic digits -> Chinese numerals, variants -> canonical.

    Idempotent.  Unknown romanised segments are left as they are and counted
    in ``report``.
    """
    report = report if report is not None else NormalizationReport()
    text = unicodedata.normalize("NFC", text)
    if table.entries:
        text = _ROMAN_RUN.sub(lambda m: _replace_romanized(m.group(0), table, report), text)

    def numeral(m):
        report.numerals += 1
        return convert_digit_run(m.group(0))

    text = _DIGIT_RUN.sub(numeral, text)
    if table.variants:
        text = "".join(table.variants.get(ch, ch) for ch in text)
    return text


def han_to_tailo(text: str, lexicon: dict[str, str], unknown: Counter | None = None) -> str:
    """Greedy longest-match romanisation of Han text.

    Characters absent from the lexicon become ``UNKNOWN_SYLLABLE`` and are
    tallied in ``unknown``.
    """
    longest = max((len(k) for k in lexicon), default=1)
    out = []
    i = 0
    while i < len(text):
        if text[i].isspace():
            i += 1
            continue
        for k in range(min(longest, len(text) - i), 0, -1):
            rom = lexicon.get(text[i:i + k])
            if rom is not None:
                out.append(rom)
                i += k
                break
        else:
            out.append(UNKNOWN_SYLLABLE)
            if unknown is not None:
                unknown[text[i]] += 1
            i += 1
    return " ".join(out)
