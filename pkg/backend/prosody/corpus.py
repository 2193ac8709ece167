"""
Corpus data model and text preprocessing

Hierarchical text model (Discourse > Utterance > WordToken > PhonemeToken) and
the preprocessing rules applied before any acoustic processing:
1. Tokenization of annotated text with "/" separators between lexical words
2. Dialogue flags for words inside quotation marks
3. Tone labels on the final phoneme of each word
4. Manifest (JSON lines) reading and writing
5. Discourse-level train/test splitting
"""

import json
import unicodedata
from enum import Enum
from typing import Any, Collection, Dict, Iterable, List, Optional, Sequence, TextIO, Tuple

import numpy as np
import structlog
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import AlignmentError, ManifestParseError, ValidationFailure

logger = structlog.get_logger(__name__)

SEPARATOR_SYMBOL = "/"
MAX_TONE = 5
OPEN_QUOTES = ("“",)
CLOSE_QUOTES = ("”",)
AMBIGUOUS_QUOTES = ('"',)

# (word surface, phoneme symbols, tone)
PinyinEntry = Tuple[str, Sequence[str], int]


class WordKind(str, Enum):
    LEXICAL = "lexical"
    PUNCTUATION = "punctuation"
    SEPARATOR = "separator"


class PhonemeToken(BaseModel):
    """One pinyin initial/final, or the "/" separator pseudo-phoneme."""
    model_config = ConfigDict(frozen=True)

    symbol: str
    tone_label: int = Field(default=0, ge=0, le=MAX_TONE)
    is_separator: bool = False
    # only meaningful on separators; set when acoustic alignments are attached
    is_silent: bool = False

    @model_validator(mode="after")
    def _separator_shape(self) -> "PhonemeToken":
        if self.is_separator and (self.symbol != SEPARATOR_SYMBOL or self.tone_label != 0):
            raise ValueError("separator phonemes must have symbol '/' and tone_label 0")
        if not self.is_separator and self.symbol == SEPARATOR_SYMBOL:
            raise ValueError("symbol '/' is reserved for separators")
        return self


class WordToken(BaseModel):
    model_config = ConfigDict(frozen=True)

    surface: str
    kind: WordKind
    phonemes: Tuple[PhonemeToken, ...] = ()
    tone: int = Field(default=0, ge=0, le=MAX_TONE)
    dialogue_flag: int = Field(default=0, ge=0, le=1)

    @model_validator(mode="after")
    def _kind_shape(self) -> "WordToken":
        n = len(self.phonemes)
        if self.kind is WordKind.PUNCTUATION and n != 0:
            raise ValueError(f"punctuation '{self.surface}' must have no phonemes")
        if self.kind is WordKind.SEPARATOR and (n != 1 or not self.phonemes[0].is_separator):
            raise ValueError("separator words carry exactly one separator phoneme")
        if self.kind is WordKind.LEXICAL:
            if n == 0:
                raise ValueError(f"lexical word '{self.surface}' has no phonemes")
            if any(p.is_separator for p in self.phonemes):
                raise ValueError(f"lexical word '{self.surface}' contains a separator phoneme")
        return self

    @property
    def phoneme_length(self) -> int:
        return len(self.phonemes)


class Utterance(BaseModel):
    model_config = ConfigDict(frozen=True)

    id: str
    words: Tuple[WordToken, ...]
    speaker_id: int = Field(ge=0)
    style_label: int = Field(ge=0)
    raw_text: str = ""

    @model_validator(mode="after")
    def _separator_interleaving(self) -> "Utterance":
        seen_lexical = False
        separators_since_lexical = 0
        for position, word in enumerate(self.words):
            if word.kind is WordKind.SEPARATOR:
                if not seen_lexical:
                    raise ValueError(f"utterance {self.id}: separator at {position} precedes every lexical word")
                separators_since_lexical += 1
            elif word.kind is WordKind.LEXICAL:
                if seen_lexical and separators_since_lexical != 1:
                    raise ValueError(
                        f"utterance {self.id}: expected exactly one separator before word {position}, "
                        f"found {separators_since_lexical}"
                    )
                seen_lexical = True
                separators_since_lexical = 0
        if separators_since_lexical:
            raise ValueError(f"utterance {self.id}: trailing separator after the last lexical word")
        return self

    @property
    def phoneme_lengths(self) -> List[int]:
        return [w.phoneme_length for w in self.words]

    @property
    def num_phonemes(self) -> int:
        return sum(self.phoneme_lengths)

    @property
    def phonemes(self) -> List[PhonemeToken]:
        return [p for w in self.words for p in w.phonemes]

    @property
    def symbols(self) -> List[str]:
        return [p.symbol for p in self.phonemes]

    @property
    def encoder_words(self) -> List[WordToken]:
        """Lexical words and punctuation in order; separators are not encoder tokens."""
        return [w for w in self.words if w.kind is not WordKind.SEPARATOR]

    @property
    def separator_mask(self) -> List[bool]:
        return [p.is_separator for p in self.phonemes]

    @property
    def silent_mask(self) -> List[bool]:
        return [p.is_separator and p.is_silent for p in self.phonemes]


class Discourse(BaseModel):
    model_config = ConfigDict(frozen=True)

    id: str
    utterances: Tuple[Utterance, ...] = Field(min_length=1)
    style_label: int = Field(ge=0)

    @model_validator(mode="after")
    def _shared_prefix(self) -> "Discourse":
        for utt in self.utterances:
            if not utt.id.startswith(self.id):
                raise ValueError(f"utterance {utt.id} does not carry discourse prefix {self.id}")
        return self

    @property
    def num_utterances(self) -> int:
        return len(self.utterances)


def utterance_id_for(discourse_id: str, index: int) -> str:
    return f"{discourse_id}-{index:03d}"


def _is_text_char(char: str) -> bool:
    return unicodedata.category(char)[0] in ("L", "N")


def _place_tones(symbols: Sequence[str], tone: int) -> Tuple[PhonemeToken, ...]:
    if not 0 <= tone <= MAX_TONE:
        raise ValidationFailure(f"tone {tone} outside 0..{MAX_TONE}")
    last = len(symbols) - 1
    return tuple(PhonemeToken(symbol=s, tone_label=tone if i == last else 0) for i, s in enumerate(symbols))


def _separator_word(dialogue_flag: int = 0) -> WordToken:
    return WordToken(
        surface=SEPARATOR_SYMBOL,
        kind=WordKind.SEPARATOR,
        phonemes=(PhonemeToken(symbol=SEPARATOR_SYMBOL, is_separator=True),),
        dialogue_flag=dialogue_flag,
    )


def _with_separators(words: Sequence[WordToken]) -> List[WordToken]:
    """Insert one separator right after each lexical word that has a later lexical word."""
    lexical_positions = [i for i, w in enumerate(words) if w.kind is WordKind.LEXICAL]
    needs_separator = set(lexical_positions[:-1])
    out: List[WordToken] = []
    for i, word in enumerate(words):
        out.append(word)
        if i in needs_separator:
            out.append(_separator_word())
    return out


def tokenize_and_separate(
    raw_text: str,
    pinyin: Sequence[PinyinEntry],
    utterance_id: str = "",
    speaker_id: int = 0,
    style_label: int = 0,
) -> Utterance:
    """
    Split annotated text into words and insert "/" separators.

    Lexical word boundaries come from the pinyin annotation; every other
    non-space character in raw_text becomes a zero-length punctuation word.

    Raises:
        AlignmentError: raw_text and pinyin disagree; index is the first
            pinyin entry that could not be matched.
    """
    words: List[WordToken] = []
    cursor = 0
    entry_index = 0
    while cursor < len(raw_text):
        char = raw_text[cursor]
        if char.isspace():
            cursor += 1
            continue
        if entry_index < len(pinyin):
            surface, symbols, tone = pinyin[entry_index]
            if surface and raw_text.startswith(surface, cursor):
                if not symbols:
                    raise AlignmentError(f"pinyin entry '{surface}' has no phonemes", index=entry_index)
                words.append(WordToken(surface=surface, kind=WordKind.LEXICAL, phonemes=_place_tones(symbols, tone), tone=tone))
                cursor += len(surface)
                entry_index += 1
                continue
        if _is_text_char(char):
            expected = pinyin[entry_index][0] if entry_index < len(pinyin) else None
            raise AlignmentError(
                f"text at offset {cursor} ('{raw_text[cursor:cursor + 8]}') does not match pinyin word {expected!r}",
                index=entry_index,
            )
        words.append(WordToken(surface=char, kind=WordKind.PUNCTUATION))
        cursor += 1

    if entry_index != len(pinyin):
        raise AlignmentError(
            f"pinyin word {pinyin[entry_index][0]!r} not found in text", index=entry_index
        )

    return Utterance(
        id=utterance_id,
        words=tuple(_with_separators(words)),
        speaker_id=speaker_id,
        style_label=style_label,
        raw_text=raw_text,
    )


def assign_dialogue_flags(
    utt: Utterance,
    open_quotes: Collection[str] = OPEN_QUOTES,
    close_quotes: Collection[str] = CLOSE_QUOTES,
    ambiguous_quotes: Collection[str] = AMBIGUOUS_QUOTES,
) -> Utterance:
    """
    Flag words inside quotation marks as dialogue (1) and everything else as narration (0).

    Quote characters themselves are narration. A separator takes the flag of
    the next lexical word. An unmatched opening quote extends to the end of the
    utterance and logs a warning.
    """
    stack: List[str] = []
    flags: List[int] = []
    for word in utt.words:
        surface = word.surface
        if word.kind is WordKind.PUNCTUATION and surface in open_quotes:
            stack.append(surface)
            flags.append(0)
        elif word.kind is WordKind.PUNCTUATION and surface in close_quotes:
            if stack:
                stack.pop()
            else:
                logger.warning("stray closing quote", utterance_id=utt.id)
            flags.append(0)
        elif word.kind is WordKind.PUNCTUATION and surface in ambiguous_quotes:
            if stack and stack[-1] == surface:
                stack.pop()
            else:
                stack.append(surface)
            flags.append(0)
        else:
            flags.append(1 if stack else 0)

    if stack:
        logger.warning("unbalanced quotes; treating dialogue as running to utterance end",
                       utterance_id=utt.id, open_quotes=len(stack))

    # separators look ahead to the next lexical word
    next_lexical_flag = 0
    for i in range(len(utt.words) - 1, -1, -1):
        kind = utt.words[i].kind
        if kind is WordKind.LEXICAL:
            next_lexical_flag = flags[i]
        elif kind is WordKind.SEPARATOR:
            flags[i] = next_lexical_flag

    words = tuple(w.model_copy(update={"dialogue_flag": f}) for w, f in zip(utt.words, flags))
    return utt.model_copy(update={"words": words})


def assign_tone_labels(utt: Utterance) -> List[int]:
    """Per-phoneme tones: a lexical word's tone on its last phoneme, 0 everywhere else."""
    tones: List[int] = []
    for word in utt.words:
        if not 0 <= word.tone <= MAX_TONE:
            raise ValidationFailure(f"word '{word.surface}' has tone {word.tone} outside 0..{MAX_TONE}")
        if word.kind is WordKind.LEXICAL:
            tones.extend([0] * (word.phoneme_length - 1))
            tones.append(word.tone)
        elif word.kind is WordKind.SEPARATOR:
            tones.append(0)
    return tones


def dialogue_flags_per_phoneme(utt: Utterance) -> List[int]:
    return [w.dialogue_flag for w in utt.words for _ in w.phonemes]


# --- manifest I/O ---------------------------------------------------------------------------

_REQUIRED_FIELDS = ("discourse_id", "utterance_index", "speaker_id", "style_id", "raw_text", "words")
_REQUIRED_WORD_FIELDS = ("surface", "kind", "tone", "phoneme_symbols")


def _word_from_record(entry: Dict[str, Any]) -> WordToken:
    missing = [k for k in _REQUIRED_WORD_FIELDS if k not in entry]
    if missing:
        raise ValueError(f"word record missing field(s) {missing}")
    kind = WordKind(entry["kind"])
    symbols = list(entry["phoneme_symbols"])
    if kind is WordKind.SEPARATOR:
        if symbols != [SEPARATOR_SYMBOL]:
            raise ValueError("separator words must list exactly ['/'] as phoneme_symbols")
        is_silent = entry.get("is_silent", False)
        if not isinstance(is_silent, bool):
            raise ValueError(f"is_silent must be a boolean, got {is_silent!r}")
        word = _separator_word()
        if not is_silent:
            return word
        return word.model_copy(update={"phonemes": (word.phonemes[0].model_copy(update={"is_silent": True}),)})
    if kind is WordKind.PUNCTUATION:
        return WordToken(surface=entry["surface"], kind=kind, phonemes=(), tone=int(entry["tone"]))
    return WordToken(surface=entry["surface"], kind=kind, phonemes=_place_tones(symbols, int(entry["tone"])),
                     tone=int(entry["tone"]))


def _word_to_record(word: WordToken) -> Dict[str, Any]:
    record: Dict[str, Any] = {
        "surface": word.surface,
        "kind": word.kind.value,
        "tone": word.tone,
        "phoneme_symbols": [p.symbol for p in word.phonemes],
    }
    # only pauses are written; a missing flag reads back as no pause
    if word.kind is WordKind.SEPARATOR and word.phonemes[0].is_silent:
        record["is_silent"] = True
    return record


def parse_manifest(
    stream: Iterable[str],
    speakers: Optional[Collection[int]] = None,
    styles: Optional[Collection[int]] = None,
) -> List[Discourse]:
    """
    Parse a JSON-lines manifest into discourses.

    Records of one discourse must be contiguous and index-ordered starting at 0.
    When speakers/styles are given, ids outside them are rejected.

    Raises:
        ManifestParseError: with the 1-based line number of the offending record.
    """
    discourses: List[Discourse] = []
    current_id: Optional[str] = None
    current_style: Optional[int] = None
    current_line = 0
    current: List[Utterance] = []
    finished_ids: set = set()
    seen_utterance_ids: set = set()

    def flush() -> None:
        if current_id is None:
            return
        try:
            discourses.append(Discourse(id=current_id, utterances=tuple(current), style_label=current_style))
        except (ValidationError, ValueError, TypeError) as exc:
            raise ManifestParseError(f"invalid discourse {current_id}: {exc}", current_line) from exc

    for line_number, line in enumerate(stream, start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestParseError(f"invalid JSON: {exc.msg}", line_number) from exc
        if not isinstance(record, dict):
            raise ManifestParseError("record is not an object", line_number)
        missing = [k for k in _REQUIRED_FIELDS if k not in record]
        if missing:
            raise ManifestParseError(f"missing required field(s) {missing}", line_number)

        discourse_id = str(record["discourse_id"])
        index = record["utterance_index"]
        speaker_id = record["speaker_id"]
        style_id = record["style_id"]
        discourse_style = record.get("discourse_style_id", style_id)
        utterance_id = utterance_id_for(discourse_id, index) if isinstance(index, int) else None

        if not isinstance(index, int) or index < 0:
            raise ManifestParseError(f"utterance_index must be a non-negative integer, got {index!r}", line_number)
        if utterance_id in seen_utterance_ids:
            raise ManifestParseError(f"duplicate utterance id {utterance_id}", line_number)
        if speakers is not None and speaker_id not in speakers:
            raise ManifestParseError(f"unknown speaker id {speaker_id}", line_number)
        for sid in (style_id, discourse_style):
            if styles is not None and sid not in styles:
                raise ManifestParseError(f"unknown style id {sid}", line_number)

        if discourse_id != current_id:
            if discourse_id in finished_ids:
                raise ManifestParseError(f"records for discourse {discourse_id} are not contiguous", line_number)
            flush()
            if current_id is not None:
                finished_ids.add(current_id)
            current_id, current_style, current_line, current = discourse_id, discourse_style, line_number, []
        elif discourse_style != current_style:
            raise ManifestParseError(f"discourse {discourse_id} has conflicting discourse_style_id", line_number)

        if index != len(current):
            raise ManifestParseError(
                f"discourse {discourse_id}: expected utterance_index {len(current)}, got {index}", line_number
            )

        try:
            words = tuple(_word_from_record(entry) for entry in record["words"])
            utt = Utterance(
                id=utterance_id,
                words=words,
                speaker_id=speaker_id,
                style_label=style_id,
                raw_text=record["raw_text"],
            )
        except (ValidationError, ValueError, TypeError) as exc:
            raise ManifestParseError(f"invalid utterance {utterance_id}: {exc}", line_number) from exc

        seen_utterance_ids.add(utterance_id)
        current.append(assign_dialogue_flags(utt))

    flush()
    return discourses


def manifest_record(discourse: Discourse, index: int) -> Dict[str, Any]:
    utt = discourse.utterances[index]
    return {
        "discourse_id": discourse.id,
        "discourse_style_id": discourse.style_label,
        "utterance_index": index,
        "speaker_id": utt.speaker_id,
        "style_id": utt.style_label,
        "raw_text": utt.raw_text,
        "words": [_word_to_record(w) for w in utt.words],
    }


def write_manifest(discourses: Iterable[Discourse], stream: TextIO) -> None:
    """Write the canonical form: sorted keys, no insignificant whitespace, LF endings."""
    for discourse in discourses:
        for index in range(discourse.num_utterances):
            record = manifest_record(discourse, index)
            stream.write(json.dumps(record, sort_keys=True, separators=(",", ":"), ensure_ascii=False))
            stream.write("\n")


def split_by_discourse(
    discourses: Sequence[Discourse], test_fraction: float, seed: int
) -> Tuple[List[Discourse], List[Discourse]]:
    """Deterministic discourse-level split; each side keeps the input order."""
    if not 0.0 < test_fraction < 1.0:
        raise ValidationFailure(f"test_fraction must be in (0, 1), got {test_fraction}")
    if len(discourses) < 2:
        raise ValidationFailure(f"need at least 2 discourses to split, got {len(discourses)}")

    n = len(discourses)
    n_test = min(max(int(round(test_fraction * n)), 1), n - 1)
    order = np.random.default_rng(seed).permutation(n)
    test_positions = set(int(i) for i in order[:n_test])
    train = [d for i, d in enumerate(discourses) if i not in test_positions]
    test = [d for i, d in enumerate(discourses) if i in test_positions]
    return train, test


def iter_utterances(discourses: Iterable[Discourse]) -> Iterable[Utterance]:
    for discourse in discourses:
        yield from discourse.utterances


def phoneme_inventory(discourses: Iterable[Discourse]) -> List[str]:
    """Sorted phoneme symbols with the separator always first."""
    symbols = {p.symbol for utt in iter_utterances(discourses) for p in utt.phonemes if not p.is_separator}
    return [SEPARATOR_SYMBOL] + sorted(symbols)
