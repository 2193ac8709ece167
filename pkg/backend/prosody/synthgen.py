"""
Synthetic corpus generator

Writes a complete corpus (manifest, frame tracks, alignments, LPE streams,
feature files, style labels) whose LPE targets follow a closed-form law of the
text features, so every learning claim can be checked against ground truth.

Target laws (z is a 3-vector, lpe = sigmoid(z)):
1. word_dependent: z = W[word] + T[tone] + D[dialogue]
2. phoneme_dependent: z = P[phoneme] + T[tone] + D[dialogue]
3. mixed: z = (W[word] + P[phoneme]) / 2 + T[tone] + D[dialogue]
4. context_offset: the word_dependent value scaled by (1 + kappa * o), where
   o is the mean style sign of the other utterances in the discourse
A separator row uses the word of the preceding lexical word. All parameters
are written to law.json.
"""

import json
import time
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import structlog
from pydantic import BaseModel, ConfigDict, Field, PositiveFloat, PositiveInt, model_validator

from .corpus import (
    SEPARATOR_SYMBOL,
    Discourse,
    Utterance,
    WordKind,
    assign_dialogue_flags,
    iter_utterances,
    tokenize_and_separate,
    utterance_id_for,
    write_manifest,
)
from .errors import ValidationFailure
from .features import (
    LPE_DIM,
    SILENCE_LABEL,
    AlignmentInterval,
    AlignmentTrack,
    FrameTrack,
    build_targets,
    write_alignment,
    write_feature_file,
    write_frame_track,
    write_lpe_stream,
)

logger = structlog.get_logger(__name__)

TargetLaw = Literal["word_dependent", "phoneme_dependent", "context_offset", "mixed"]

LAW_FILE = "law.json"
STYLES_FILE = "styles.jsonl"
CONTEXT_GAIN = 0.3
PITCH_LPE_GAIN = 0.2
# pause probability after words that precede punctuation, and elsewhere
PUNCTUATION_PAUSE_PROBABILITY = 0.5
PLAIN_PAUSE_PROBABILITY = 0.15
CJK_BASE = 0x4E00
COMMA = "，"
ENDINGS = ("。", "？", "！")


class GeneratorSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    num_discourses: PositiveInt = 200
    utterances_per_discourse: PositiveInt = 10
    vocab_size: PositiveInt = 60
    phoneme_alphabet_size: PositiveInt = 24
    num_speakers: PositiveInt = 2
    num_styles: int = Field(default=2, ge=2)
    seed: int = 1234
    target_law: TargetLaw = "word_dependent"
    min_words: PositiveInt = 4
    max_words: PositiveInt = 9
    frame_period_ms: PositiveFloat = 10.0
    dialogue_probability: float = Field(default=0.3, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _ranges(self) -> "GeneratorSpec":
        if self.min_words > self.max_words:
            raise ValueError(f"min_words {self.min_words} exceeds max_words {self.max_words}")
        if self.vocab_size < 2 * self.num_styles:
            raise ValueError(f"vocab_size {self.vocab_size} leaves no shared words for {self.num_styles} styles")
        if self.phoneme_alphabet_size < 2:
            raise ValueError("need at least 2 phoneme symbols")
        return self


class LawParameters(BaseModel):
    """Everything needed to recompute the LPE targets from a manifest."""
    law: TargetLaw
    surfaces: List[str]
    phonemes: List[str]
    word_table: List[List[float]]
    phoneme_table: List[List[float]]
    tone_table: List[List[float]]
    dialogue_table: List[List[float]]
    context_gain: float = CONTEXT_GAIN
    offset_margin: float = 0.0

    def word_index(self) -> Dict[str, int]:
        return {s: i for i, s in enumerate(self.surfaces)}

    def phoneme_index(self) -> Dict[str, int]:
        return {s: i for i, s in enumerate(self.phonemes)}


def sigmoid(z: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-z))


def style_sign(style: int) -> float:
    return 1.0 if style % 2 else -1.0


def context_offsets(discourse: Discourse) -> List[float]:
    """Leave-one-out mean style sign of the other utterances (0 for a single utterance)."""
    signs = [style_sign(u.style_label) for u in discourse.utterances]
    m = len(signs)
    if m == 1:
        return [0.0]
    total = sum(signs)
    return [(total - s) / (m - 1) for s in signs]


def law_logits(law: LawParameters, utt: Utterance) -> np.ndarray:
    """N x 3 pre-sigmoid values for one utterance."""
    words = law.word_index()
    phonemes = law.phoneme_index()
    word_table = np.asarray(law.word_table)
    phoneme_table = np.asarray(law.phoneme_table)
    tone_table = np.asarray(law.tone_table)
    dialogue_table = np.asarray(law.dialogue_table)

    rows = []
    owner = None
    for word in utt.words:
        if word.kind is WordKind.LEXICAL:
            owner = word.surface
        for phoneme in word.phonemes:
            w = word_table[words[owner]]
            p = phoneme_table[phonemes[phoneme.symbol]]
            if law.law in ("word_dependent", "context_offset"):
                base = w
            elif law.law == "phoneme_dependent":
                base = p
            else:
                base = 0.5 * (w + p)
            rows.append(base + tone_table[phoneme.tone_label] + dialogue_table[word.dialogue_flag])
    return np.asarray(rows, dtype=np.float64).reshape(-1, LPE_DIM)


def recompute_lpe(law: LawParameters, discourse: Discourse, with_context: bool = True) -> Dict[str, np.ndarray]:
    """Closed-form LPE per utterance (before non-silent separators are zeroed)."""
    offsets = context_offsets(discourse)
    result = {}
    for utt, offset in zip(discourse.utterances, offsets):
        lpe = sigmoid(law_logits(law, utt))
        if law.law == "context_offset" and with_context:
            lpe = np.clip(lpe * (1.0 + law.context_gain * offset), 0.0, 1.0)
        result[utt.id] = lpe
    return result


def expected_targets(law: LawParameters, discourse: Discourse) -> Dict[str, np.ndarray]:
    """The stored LPE targets: recompute_lpe with non-silent separators zeroed (needs silence flags)."""
    result = recompute_lpe(law, discourse)
    for utt in discourse.utterances:
        for k, phoneme in enumerate(utt.phonemes):
            if phoneme.is_separator and not phoneme.is_silent:
                result[utt.id][k] = 0.0
    return result


def scored_lpe_rows(corpus) -> np.ndarray:
    """All LPE target rows that the loss and the metrics score (non-silent separators excluded)."""
    rows = []
    for utt in iter_utterances(corpus.discourses):
        lpe = np.asarray(corpus.targets[utt.id].lpe, dtype=np.float64).reshape(-1, LPE_DIM)
        keep = [not (p.is_separator and not p.is_silent) for p in utt.phonemes]
        rows.append(lpe[np.asarray(keep, dtype=bool)])
    return np.concatenate(rows) if rows else np.zeros((0, LPE_DIM))


def mean_baseline_mse(corpus) -> float:
    """
    MSE of predicting the per-component corpus mean LPE everywhere.

    Raises:
        ValidationFailure: no scored LPE rows
    """
    rows = scored_lpe_rows(corpus)
    if rows.size == 0:
        raise ValidationFailure("mean baseline over an empty corpus")
    return float(np.mean((rows - rows.mean(axis=0)) ** 2))


# --- generation -------------------------------------------------------------------------------

class _Lexicon:
    """Surfaces, pronunciations and style pools drawn from the generator seed."""

    def __init__(self, spec: GeneratorSpec, rng: np.random.Generator):
        self.surfaces = [chr(CJK_BASE + i) for i in range(spec.vocab_size)]
        self.phonemes = [f"p{i}" for i in range(spec.phoneme_alphabet_size)]
        self.pronunciations = [
            [self.phonemes[j] for j in rng.integers(0, spec.phoneme_alphabet_size, size=int(rng.integers(1, 4)))]
            for _ in self.surfaces
        ]
        # the first num_styles * per_style words are style markers, the rest are shared
        per_style = max(1, spec.vocab_size // (2 * spec.num_styles))
        self.style_pools = [list(range(s * per_style, (s + 1) * per_style)) for s in range(spec.num_styles)]
        self.shared = list(range(spec.num_styles * per_style, spec.vocab_size))
        self.unvoiced = set(self.phonemes[: max(1, spec.phoneme_alphabet_size // 6)])


def _draw_law(spec: GeneratorSpec, lexicon: _Lexicon, rng: np.random.Generator) -> LawParameters:
    symbols = [SEPARATOR_SYMBOL] + lexicon.phonemes
    tone_table = rng.uniform(-0.4, 0.2, size=(6, LPE_DIM))
    tone_table[0] = 0.0
    dialogue_table = np.zeros((2, LPE_DIM))
    dialogue_table[1] = rng.uniform(0.0, 0.3, size=LPE_DIM)
    return LawParameters(
        law=spec.target_law,
        surfaces=lexicon.surfaces,
        phonemes=symbols,
        word_table=rng.uniform(-1.0, 0.5, size=(len(lexicon.surfaces), LPE_DIM)).tolist(),
        phoneme_table=rng.uniform(-1.0, 0.5, size=(len(symbols), LPE_DIM)).tolist(),
        tone_table=tone_table.tolist(),
        dialogue_table=dialogue_table.tolist(),
    )


def _utterance_text(
    spec: GeneratorSpec, lexicon: _Lexicon, style: int, rng: np.random.Generator
) -> Tuple[str, List[Tuple[str, List[str], int]]]:
    n_words = int(rng.integers(spec.min_words, spec.max_words + 1))
    chosen = [int(rng.choice(lexicon.style_pools[style]))]
    for _ in range(n_words - 1):
        pool = lexicon.style_pools[style] if rng.random() < 0.5 else lexicon.shared
        chosen.append(int(rng.choice(pool)))

    quote = None
    if n_words >= 3 and rng.random() < spec.dialogue_probability:
        start = int(rng.integers(1, n_words - 1))
        quote = (start, int(rng.integers(start, n_words - 1)))

    pieces: List[str] = []
    pinyin = []
    for i, index in enumerate(chosen):
        if quote is not None and i == quote[0]:
            pieces.append("“")
        surface = lexicon.surfaces[index]
        pieces.append(surface)
        pinyin.append((surface, list(lexicon.pronunciations[index]), int(rng.integers(1, 6))))
        if quote is not None and i == quote[1]:
            pieces.append("”")
        if i < n_words - 1 and rng.random() < 0.25:
            pieces.append(COMMA)
    pieces.append(ENDINGS[int(rng.integers(0, len(ENDINGS)))])
    return "".join(pieces), pinyin


def _pauses(utt: Utterance, rng: np.random.Generator) -> List[bool]:
    """Silence decision per separator; separators that precede punctuation pause more often."""
    decisions = []
    for i, word in enumerate(utt.words):
        if word.kind is not WordKind.SEPARATOR:
            continue
        following = utt.words[i + 1] if i + 1 < len(utt.words) else None
        near_punctuation = following is not None and following.kind is WordKind.PUNCTUATION
        probability = PUNCTUATION_PAUSE_PROBABILITY if near_punctuation else PLAIN_PAUSE_PROBABILITY
        decisions.append(bool(rng.random() < probability))
    return decisions


def _realize(
    utt: Utterance,
    lpe: np.ndarray,
    pauses: Sequence[bool],
    lexicon: _Lexicon,
    f0_base: np.ndarray,
    tone_shift: np.ndarray,
    phoneme_energy: Dict[str, float],
    spec: GeneratorSpec,
    rng: np.random.Generator,
) -> Tuple[FrameTrack, AlignmentTrack]:
    """Piecewise-constant frame tracks and the matching alignment."""
    f0: List[float] = []
    energy: List[float] = []
    intervals: List[AlignmentInterval] = []

    def add(label: str, frames: int, f0_value: float, energies: Sequence[float]) -> None:
        start = len(f0)
        f0.extend([f0_value] * frames)
        energy.extend(energies)
        intervals.append(AlignmentInterval(label=label, start_frame=start, end_frame=start + frames))

    def silence(frames: int) -> None:
        add(SILENCE_LABEL, frames, 0.0, [float(v) for v in rng.uniform(0.2, 0.4, size=frames)])

    silence(int(rng.integers(3, 7)))
    pause_iter = iter(pauses)
    for k, phoneme in enumerate(utt.phonemes):
        if phoneme.is_separator:
            if next(pause_iter):
                silence(int(rng.integers(3, 9)))
            continue
        frames = int(rng.integers(3, 9))
        if phoneme.symbol in lexicon.unvoiced:
            f0_value = 0.0
        else:
            log_f0 = np.log(f0_base[utt.speaker_id]) + tone_shift[phoneme.tone_label] + PITCH_LPE_GAIN * (lpe[k, 0] - 0.5)
            f0_value = float(np.exp(log_f0))
        level = float(1.0 + lpe[k, 1] + 0.5 * phoneme_energy[phoneme.symbol])
        add(phoneme.symbol, frames, f0_value, [level] * frames)
    silence(int(rng.integers(3, 7)))

    track = FrameTrack(utterance_id=utt.id, frame_period_ms=spec.frame_period_ms, f0_hz=tuple(f0), energy=tuple(energy))
    return track, AlignmentTrack(utterance_id=utt.id, intervals=tuple(intervals))


def _discourse_styles(spec: GeneratorSpec, rng: np.random.Generator) -> Tuple[List[int], int]:
    m = spec.utterances_per_discourse
    if spec.target_law == "context_offset":
        # independent utterance styles; the discourse takes the majority, ties to the lowest id
        styles = [int(s) for s in rng.integers(0, spec.num_styles, size=m)]
        counts = np.bincount(styles, minlength=spec.num_styles)
        return styles, int(np.argmax(counts))
    style = int(rng.integers(0, spec.num_styles))
    return [style] * m, style


def generate(spec: GeneratorSpec, out_dir: Path) -> LawParameters:
    """
    Write a synthetic corpus into an empty (or missing) directory.

    Layout: law.json, manifest.jsonl, styles.jsonl, frames/, align/, lpe/, features/.

    Raises:
        ValidationFailure: out_dir exists and is not empty
    """
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()):
        raise ValidationFailure(f"output directory {out_dir} is not empty")
    started = time.time()
    for sub in ("frames", "align", "lpe", "features"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(spec.seed)
    lexicon = _Lexicon(spec, rng)
    law = _draw_law(spec, lexicon, rng)
    f0_base = rng.uniform(100.0, 220.0, size=spec.num_speakers)
    tone_shift = np.concatenate([[0.0], rng.uniform(-0.3, 0.3, size=5)])
    phoneme_energy = {s: float(v) for s, v in zip(lexicon.phonemes, rng.uniform(0.0, 1.0, size=len(lexicon.phonemes)))}

    discourses: List[Discourse] = []
    margins: List[np.ndarray] = []
    style_records: List[dict] = []
    for d in range(spec.num_discourses):
        discourse_id = f"d{d:04d}"
        styles, discourse_style = _discourse_styles(spec, rng)
        utterances = []
        for index, style in enumerate(styles):
            raw_text, pinyin = _utterance_text(spec, lexicon, style, rng)
            utt = tokenize_and_separate(raw_text, pinyin, utterance_id_for(discourse_id, index),
                                        int(rng.integers(0, spec.num_speakers)), style)
            utterances.append(assign_dialogue_flags(utt))
        discourse = Discourse(id=discourse_id, utterances=tuple(utterances), style_label=discourse_style)

        lpe = recompute_lpe(law, discourse)
        plain = recompute_lpe(law, discourse, with_context=False)
        marked_utterances = []
        for utt in discourse.utterances:
            pauses = _pauses(utt, rng)
            track, align = _realize(utt, lpe[utt.id], pauses, lexicon, f0_base, tone_shift, phoneme_energy, spec, rng)
            rows = [tuple(float(v) for v in row) for row in lpe[utt.id]]
            marked, targets = build_targets(utt, track, align, rows)
            marked_utterances.append(marked)
            scored = np.asarray([not (p.is_separator and not p.is_silent) for p in marked.phonemes])
            margins.append(((lpe[utt.id] - plain[utt.id]) ** 2)[scored])

            with open(out_dir / "frames" / f"{utt.id}.frames", "w", encoding="utf-8", newline="\n") as handle:
                write_frame_track(track, handle)
            with open(out_dir / "align" / f"{utt.id}.align", "w", encoding="utf-8", newline="\n") as handle:
                write_alignment(align, handle)
            with open(out_dir / "lpe" / f"{utt.id}.lpe", "w", encoding="utf-8", newline="\n") as handle:
                write_lpe_stream(utt.id, rows, handle)
            with open(out_dir / "features" / f"{utt.id}.feat", "w", encoding="utf-8", newline="\n") as handle:
                write_feature_file(targets, handle)
            style_records.append({"kind": "utterance", "id": utt.id, "style_id": utt.style_label})
        style_records.append({"kind": "discourse", "id": discourse_id, "style_id": discourse_style})
        discourses.append(discourse.model_copy(update={"utterances": tuple(marked_utterances)}))

    law.offset_margin = float(np.mean(np.concatenate(margins))) if margins else 0.0
    with open(out_dir / "manifest.jsonl", "w", encoding="utf-8", newline="\n") as handle:
        write_manifest(discourses, handle)
    write_styles(style_records, out_dir / STYLES_FILE)
    with open(out_dir / LAW_FILE, "w", encoding="utf-8", newline="\n") as handle:
        handle.write(law.model_dump_json(indent=2))
        handle.write("\n")

    logger.info("synthetic corpus generated", out_dir=str(out_dir), law=spec.target_law,
                discourses=spec.num_discourses, utterances=spec.num_discourses * spec.utterances_per_discourse,
                offset_margin=round(law.offset_margin, 6), elapsed=round(time.time() - started, 2))
    return law


def write_styles(records: Sequence[dict], path: Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        for record in records:
            handle.write(json.dumps(record, sort_keys=True, separators=(",", ":"), ensure_ascii=False) + "\n")


def load_law(root: Path) -> LawParameters:
    with open(Path(root) / LAW_FILE, encoding="utf-8") as handle:
        return LawParameters.model_validate_json(handle.read())


def generator_spec_from(options: Optional[dict] = None) -> GeneratorSpec:
    return GeneratorSpec.model_validate(options or {})
