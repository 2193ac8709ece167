"""
Acoustic feature targets

Ingests frame-level f0/energy tracks and phoneme interval alignments and turns
them into per-phoneme targets:
1. Mean logF0 over voiced frames and mean energy per phoneme interval
2. The separator rule: a "silence" interval at a separator is measured like a
   phoneme, otherwise the separator's features are all zero
3. Externally supplied 3-dim LPE targets in [0, 1]
4. Text formats PROSO-FRAMES, PROSO-ALIGN, PROSO-LPE and PROSO-FEAT
"""

import math
from typing import Iterable, List, Optional, Sequence, TextIO, Tuple

import numpy as np
import structlog
from pydantic import BaseModel, ConfigDict, PositiveFloat, ValidationError, model_validator

from .corpus import Utterance, WordKind
from .errors import AlignmentError, FeatureFileError, LengthMismatchError, ValidationFailure

logger = structlog.get_logger(__name__)

SILENCE_LABEL = "silence"
FORMAT_VERSION = "v1"
FRAMES_MAGIC = "PROSO-FRAMES"
ALIGN_MAGIC = "PROSO-ALIGN"
FEAT_MAGIC = "PROSO-FEAT"
LPE_MAGIC = "PROSO-LPE"
LPE_DIM = 3

LpeRow = Tuple[float, float, float]


class FrameTrack(BaseModel):
    model_config = ConfigDict(frozen=True)

    utterance_id: str
    frame_period_ms: PositiveFloat
    f0_hz: Tuple[float, ...]
    energy: Tuple[float, ...]

    @model_validator(mode="after")
    def _shape(self) -> "FrameTrack":
        if len(self.f0_hz) != len(self.energy):
            raise ValueError(f"f0 has {len(self.f0_hz)} frames but energy has {len(self.energy)}")
        if any(v < 0 for v in self.f0_hz) or any(v < 0 for v in self.energy):
            raise ValueError("f0 and energy must be non-negative")
        return self

    @property
    def num_frames(self) -> int:
        return len(self.f0_hz)


class AlignmentInterval(BaseModel):
    model_config = ConfigDict(frozen=True)

    label: str
    start_frame: int
    end_frame: int

    @model_validator(mode="after")
    def _ordered(self) -> "AlignmentInterval":
        if not 0 <= self.start_frame < self.end_frame:
            raise ValueError(f"interval '{self.label}' needs 0 <= start < end, got {self.start_frame}..{self.end_frame}")
        return self

    @property
    def is_silence(self) -> bool:
        return self.label == SILENCE_LABEL


class AlignmentTrack(BaseModel):
    model_config = ConfigDict(frozen=True)

    utterance_id: str
    intervals: Tuple[AlignmentInterval, ...]

    @model_validator(mode="after")
    def _non_overlapping(self) -> "AlignmentTrack":
        for prev, cur in zip(self.intervals, self.intervals[1:]):
            if cur.start_frame < prev.end_frame:
                raise ValueError(f"intervals '{prev.label}' and '{cur.label}' overlap or are out of order")
        return self


class PhonemeTargets(BaseModel):
    """Per-phoneme ground truth (or predictions): pitch, energy and 3-dim LPE."""
    model_config = ConfigDict(frozen=True)

    utterance_id: str
    pitch: Tuple[float, ...]
    energy: Tuple[float, ...]
    lpe: Tuple[LpeRow, ...]

    @model_validator(mode="after")
    def _shape(self) -> "PhonemeTargets":
        n = len(self.pitch)
        if len(self.energy) != n or len(self.lpe) != n:
            raise ValueError(f"pitch/energy/lpe lengths differ: {n}, {len(self.energy)}, {len(self.lpe)}")
        for row in self.lpe:
            if any(not 0.0 <= v <= 1.0 for v in row):
                raise ValueError(f"LPE component outside [0, 1]: {row}")
        return self

    @property
    def num_phonemes(self) -> int:
        return len(self.pitch)

    def as_array(self) -> np.ndarray:
        """N x 5 array: pitch, energy, lpe1..3."""
        if not self.pitch:
            return np.zeros((0, 2 + LPE_DIM))
        return np.column_stack([np.asarray(self.pitch), np.asarray(self.energy), np.asarray(self.lpe)])


class SeparatorFeatures(BaseModel):
    """Result of the separator rule, one entry per separator in utterance order."""
    positions: List[int]
    pitch: List[float]
    energy: List[float]
    is_silent: List[bool]


# --- aggregation ----------------------------------------------------------------------------

def _match_intervals(utt: Utterance, align: AlignmentTrack) -> Tuple[List[Optional[AlignmentInterval]], List[bool]]:
    """Assign an interval (or None) to every phoneme of the utterance."""
    intervals = align.intervals
    matched: List[Optional[AlignmentInterval]] = []
    silent: List[bool] = []
    pos = 0
    for k, phoneme in enumerate(utt.phonemes):
        if phoneme.is_separator:
            if pos < len(intervals) and intervals[pos].is_silence:
                if pos + 1 < len(intervals) and intervals[pos + 1].is_silence:
                    raise AlignmentError("two consecutive silence intervals at one separator", index=k)
                matched.append(intervals[pos])
                silent.append(True)
                pos += 1
            else:
                matched.append(None)
                silent.append(False)
            continue

        # leading/trailing silences and pauses without a separator carry no target
        while pos < len(intervals) and intervals[pos].is_silence:
            pos += 1
        if pos >= len(intervals):
            raise AlignmentError(f"phoneme '{phoneme.symbol}' has no matching interval", index=k)
        if intervals[pos].label != phoneme.symbol:
            raise AlignmentError(
                f"phoneme '{phoneme.symbol}' aligned to interval '{intervals[pos].label}'", index=k
            )
        matched.append(intervals[pos])
        silent.append(False)
        pos += 1

    leftover = [iv.label for iv in intervals[pos:] if not iv.is_silence]
    if leftover:
        raise AlignmentError(f"alignment has {len(leftover)} unmatched phoneme interval(s) {leftover[:3]}",
                             index=utt.num_phonemes)
    return matched, silent


def _interval_means(track: FrameTrack, interval: AlignmentInterval, index: int) -> Tuple[float, float]:
    if interval.end_frame > track.num_frames:
        raise AlignmentError(
            f"interval '{interval.label}' ends at frame {interval.end_frame} but the track has {track.num_frames}",
            index=index,
        )
    f0 = np.asarray(track.f0_hz[interval.start_frame:interval.end_frame], dtype=np.float64)
    energy = np.asarray(track.energy[interval.start_frame:interval.end_frame], dtype=np.float64)
    voiced = f0[f0 > 0]
    pitch = float(np.mean(np.log(voiced))) if voiced.size else 0.0
    return pitch, float(np.mean(energy))


def apply_separator_rule(utt: Utterance, align: AlignmentTrack, track: FrameTrack) -> SeparatorFeatures:
    """Measure silent separators like phonemes; zero out the rest."""
    matched, silent = _match_intervals(utt, align)
    result = SeparatorFeatures(positions=[], pitch=[], energy=[], is_silent=[])
    for k, phoneme in enumerate(utt.phonemes):
        if not phoneme.is_separator:
            continue
        interval = matched[k]
        pitch, energy = _interval_means(track, interval, k) if interval is not None else (0.0, 0.0)
        result.positions.append(k)
        result.pitch.append(pitch)
        result.energy.append(energy)
        result.is_silent.append(silent[k])
    return result


def aggregate_pitch_energy(utt: Utterance, track: FrameTrack, align: AlignmentTrack) -> Tuple[List[float], List[float]]:
    """Per-phoneme mean logF0 (voiced frames only, 0 if none) and mean energy; length N."""
    matched, _ = _match_intervals(utt, align)
    pitch: List[float] = []
    energy: List[float] = []
    for k, interval in enumerate(matched):
        if interval is None:
            pitch.append(0.0)
            energy.append(0.0)
        else:
            p, e = _interval_means(track, interval, k)
            pitch.append(p)
            energy.append(e)
    return pitch, energy


def mark_silences(utt: Utterance, is_silent: Sequence[bool]) -> Utterance:
    """Return the utterance with each separator's is_silent flag set, in separator order."""
    flags = iter(is_silent)
    words = []
    for word in utt.words:
        if word.kind is WordKind.SEPARATOR:
            try:
                flag = bool(next(flags))
            except StopIteration:
                raise LengthMismatchError(f"utterance {utt.id}: fewer silence flags than separators") from None
            phoneme = word.phonemes[0].model_copy(update={"is_silent": flag})
            word = word.model_copy(update={"phonemes": (phoneme,)})
        words.append(word)
    if next(flags, None) is not None:
        raise LengthMismatchError(f"utterance {utt.id}: more silence flags than separators")
    return utt.model_copy(update={"words": tuple(words)})


def infer_silences(utt: Utterance, targets: "PhonemeTargets") -> Utterance:
    """
    Combine the manifest's separator silence flags with the stored targets.

    Feature files have no silence column, so a separator is also taken as
    silent when its row is nonzero. A pause measured as all zeros is only
    recoverable from the manifest flag, which prepare and generate write.
    """
    rows = targets.as_array()
    flags = [p.is_silent or bool(np.any(rows[k] != 0.0)) for k, p in enumerate(utt.phonemes) if p.is_separator]
    return mark_silences(utt, flags)


def attach_lpe_targets(targets: PhonemeTargets, lpe_rows: Sequence[Sequence[float]], utt: Utterance) -> PhonemeTargets:
    """
    Fill the LPE column of targets.

    Non-silent separators are forced to (0, 0, 0); utt must already carry
    separator silence flags.

    Raises:
        LengthMismatchError: row count differs from N
        ValidationFailure: a row is not 3-dim or a component is outside [0, 1]
    """
    n = targets.num_phonemes
    if len(lpe_rows) != n:
        raise LengthMismatchError(f"utterance {targets.utterance_id}: {len(lpe_rows)} LPE rows for N={n}")
    if utt.num_phonemes != n:
        raise LengthMismatchError(f"utterance {utt.id}: N={utt.num_phonemes} but targets have {n}")

    rows: List[LpeRow] = []
    for k, (row, phoneme) in enumerate(zip(lpe_rows, utt.phonemes)):
        if len(row) != LPE_DIM:
            raise ValidationFailure(f"LPE row {k} has {len(row)} components, expected {LPE_DIM}")
        values = tuple(float(v) for v in row)
        if any(not (0.0 <= v <= 1.0) for v in values):
            raise ValidationFailure(f"LPE row {k} {values} outside [0, 1]")
        if phoneme.is_separator and not phoneme.is_silent:
            values = (0.0, 0.0, 0.0)
        rows.append(values)
    return targets.model_copy(update={"lpe": tuple(rows)})


def build_targets(
    utt: Utterance, track: FrameTrack, align: AlignmentTrack, lpe_rows: Sequence[Sequence[float]]
) -> Tuple[Utterance, PhonemeTargets]:
    """Full per-utterance feature assembly: aggregation, separator rule, LPE attachment."""
    for source in (track.utterance_id, align.utterance_id):
        if source != utt.id:
            raise AlignmentError(f"track for '{source}' given for utterance '{utt.id}'")
    separators = apply_separator_rule(utt, align, track)
    marked = mark_silences(utt, separators.is_silent)
    pitch, energy = aggregate_pitch_energy(marked, track, align)
    zeros = tuple((0.0, 0.0, 0.0) for _ in pitch)
    targets = PhonemeTargets(utterance_id=utt.id, pitch=tuple(pitch), energy=tuple(energy), lpe=zeros)
    return marked, attach_lpe_targets(targets, lpe_rows, marked)


# --- text formats ---------------------------------------------------------------------------

def _fmt(value: float) -> str:
    text = f"{value:.9f}"
    return "0.000000000" if text == "-0.000000000" else text


def _header(lines: List[str], magic: str, min_fields: int) -> List[str]:
    if not lines:
        raise FeatureFileError(f"empty file, expected a {magic} header", 1)
    fields = lines[0].split()
    if not fields or fields[0] != magic:
        raise FeatureFileError(f"expected '{magic}' header, got {lines[0][:40]!r}", 1)
    if len(fields) < 2 or fields[1] != FORMAT_VERSION:
        found = fields[1] if len(fields) > 1 else None
        raise FeatureFileError(f"unsupported {magic} version {found!r}, expected {FORMAT_VERSION}", 1)
    if len(fields) != min_fields:
        raise FeatureFileError(f"{magic} header needs {min_fields} fields, got {len(fields)}", 1)
    return fields


def _read_lines(stream: Iterable[str]) -> List[str]:
    return [line.rstrip("\r\n") for line in stream if line.strip()]


def _float_row(line: str, width: int, line_number: int) -> List[float]:
    parts = line.split()
    if len(parts) != width:
        raise FeatureFileError(f"expected {width} values, got {len(parts)}", line_number)
    try:
        values = [float(p) for p in parts]
    except ValueError as exc:
        raise FeatureFileError(f"non-numeric value in {line!r}", line_number) from exc
    if not all(math.isfinite(v) for v in values):
        raise FeatureFileError("non-finite value", line_number)
    return values


def write_frame_track(track: FrameTrack, stream: TextIO) -> None:
    stream.write(f"{FRAMES_MAGIC} {FORMAT_VERSION} {track.utterance_id} {track.frame_period_ms!r}\n")
    for f0, energy in zip(track.f0_hz, track.energy):
        stream.write(f"{f0!r} {energy!r}\n")


def read_frame_track(stream: Iterable[str]) -> FrameTrack:
    lines = _read_lines(stream)
    fields = _header(lines, FRAMES_MAGIC, 4)
    try:
        period = float(fields[3])
    except ValueError as exc:
        raise FeatureFileError(f"bad frame period {fields[3]!r}", 1) from exc
    rows = [_float_row(line, 2, i) for i, line in enumerate(lines[1:], start=2)]
    try:
        return FrameTrack(utterance_id=fields[2], frame_period_ms=period,
                          f0_hz=tuple(r[0] for r in rows), energy=tuple(r[1] for r in rows))
    except ValidationError as exc:
        raise FeatureFileError(f"invalid frame track: {exc}") from exc


def write_alignment(align: AlignmentTrack, stream: TextIO) -> None:
    stream.write(f"{ALIGN_MAGIC} {FORMAT_VERSION} {align.utterance_id}\n")
    for interval in align.intervals:
        stream.write(f"{interval.label} {interval.start_frame} {interval.end_frame}\n")


def read_alignment(stream: Iterable[str]) -> AlignmentTrack:
    lines = _read_lines(stream)
    fields = _header(lines, ALIGN_MAGIC, 3)
    intervals = []
    for line_number, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if len(parts) != 3:
            raise FeatureFileError(f"expected '<label> <start> <end>', got {line!r}", line_number)
        try:
            intervals.append(AlignmentInterval(label=parts[0], start_frame=int(parts[1]), end_frame=int(parts[2])))
        except (ValueError, ValidationError) as exc:
            raise FeatureFileError(f"invalid interval {line!r}: {exc}", line_number) from exc
    try:
        return AlignmentTrack(utterance_id=fields[2], intervals=tuple(intervals))
    except ValidationError as exc:
        raise FeatureFileError(f"invalid alignment: {exc}") from exc


def write_feature_file(targets: PhonemeTargets, stream: TextIO) -> None:
    """PROSO-FEAT v1: header, then one '<pitch> <energy> <lpe1> <lpe2> <lpe3>' row per phoneme."""
    stream.write(f"{FEAT_MAGIC} {FORMAT_VERSION} {targets.utterance_id} {targets.num_phonemes}\n")
    for pitch, energy, row in zip(targets.pitch, targets.energy, targets.lpe):
        stream.write(" ".join(_fmt(v) for v in (pitch, energy, *row)) + "\n")


def _declared_count(fields: List[str], magic: str) -> int:
    try:
        count = int(fields[3])
    except ValueError as exc:
        raise FeatureFileError(f"{magic} row count {fields[3]!r} is not an integer", 1) from exc
    if count < 0:
        raise FeatureFileError(f"negative row count {count}", 1)
    return count


def read_feature_file(stream: Iterable[str]) -> PhonemeTargets:
    lines = _read_lines(stream)
    fields = _header(lines, FEAT_MAGIC, 4)
    declared = _declared_count(fields, FEAT_MAGIC)
    rows = [_float_row(line, 2 + LPE_DIM, i) for i, line in enumerate(lines[1:], start=2)]
    if len(rows) != declared:
        raise FeatureFileError(f"header declares {declared} rows but file has {len(rows)}")
    try:
        return PhonemeTargets(
            utterance_id=fields[2],
            pitch=tuple(r[0] for r in rows),
            energy=tuple(r[1] for r in rows),
            lpe=tuple((r[2], r[3], r[4]) for r in rows),
        )
    except ValidationError as exc:
        raise FeatureFileError(f"invalid targets: {exc}") from exc


def write_lpe_stream(utterance_id: str, rows: Sequence[Sequence[float]], stream: TextIO) -> None:
    stream.write(f"{LPE_MAGIC} {FORMAT_VERSION} {utterance_id} {len(rows)}\n")
    for row in rows:
        stream.write(" ".join(_fmt(v) for v in row) + "\n")


def read_lpe_stream(stream: Iterable[str]) -> Tuple[str, List[LpeRow]]:
    """Read LPE rows from a PROSO-LPE file, or the LPE columns of a PROSO-FEAT file."""
    lines = _read_lines(stream)
    if lines and lines[0].startswith(FEAT_MAGIC):
        targets = read_feature_file(lines)
        return targets.utterance_id, list(targets.lpe)
    fields = _header(lines, LPE_MAGIC, 4)
    declared = _declared_count(fields, LPE_MAGIC)
    rows = [tuple(_float_row(line, LPE_DIM, i)) for i, line in enumerate(lines[1:], start=2)]
    if len(rows) != declared:
        raise FeatureFileError(f"header declares {declared} rows but file has {len(rows)}")
    return fields[2], rows
