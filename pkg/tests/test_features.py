"""
Test Acoustic Feature Targets

Per-phoneme aggregation, the separator rule, LPE attachment and the
PROSO-* text formats, checked against the hand-built fixture corpus.
"""

import io
import math

import pytest

from prosody.errors import AlignmentError, FeatureFileError, LengthMismatchError, ValidationFailure
from prosody.features import (
    AlignmentInterval,
    AlignmentTrack,
    PhonemeTargets,
    apply_separator_rule,
    build_targets,
    infer_silences,
    read_alignment,
    read_feature_file,
    read_frame_track,
    read_lpe_stream,
    write_feature_file,
    write_lpe_stream,
)

from .conftest import FIXTURE_CORPUS

EXPECTED_PITCH = [0.0, math.log(100), 0.0, math.log(200), math.log(100), 0.0,
                  math.log(150), math.log(120), 0.0, math.log(200)]
EXPECTED_ENERGY = [0.6, 1.0, 0.0, 0.3, 0.9, 0.3, 0.8, 0.6, 0.4, 1.2]


def _load(utterance_id: str):
    with open(FIXTURE_CORPUS / "frames" / f"{utterance_id}.frames", encoding="utf-8") as handle:
        track = read_frame_track(handle)
    with open(FIXTURE_CORPUS / "align" / f"{utterance_id}.align", encoding="utf-8") as handle:
        align = read_alignment(handle)
    with open(FIXTURE_CORPUS / "lpe" / f"{utterance_id}.lpe", encoding="utf-8") as handle:
        lpe_id, rows = read_lpe_stream(handle)
    assert lpe_id == utterance_id
    return track, align, rows


@pytest.mark.unit
def test_fixture_files_parse():
    track, align, rows = _load("d0001-000")
    assert track.utterance_id == "d0001-000"
    assert track.frame_period_ms == 10.0
    assert track.num_frames == 28
    assert len(align.intervals) == 11
    assert align.intervals[5] == AlignmentInterval(label="silence", start_frame=13, end_frame=16)
    assert len(rows) == 10
    print("✅ Frame, alignment and LPE fixtures parsed")


@pytest.mark.unit
def test_per_phoneme_targets_match_hand_computation(fixture_discourses):
    utt = fixture_discourses[0].utterances[0]
    track, align, rows = _load(utt.id)
    marked, targets = build_targets(utt, track, align, rows)

    assert targets.pitch == pytest.approx(EXPECTED_PITCH, abs=1e-12)
    assert targets.energy == pytest.approx(EXPECTED_ENERGY, abs=1e-12)
    assert marked.silent_mask == [False, False, False, False, False, True, False, False, False, False]
    # non-silent separator LPE forced to zero, silent separator keeps its row
    assert targets.lpe[2] == (0.0, 0.0, 0.0)
    assert targets.lpe[5] == pytest.approx((0.9, 0.1, 0.4))
    assert targets.lpe[8] == pytest.approx((0.0, 1.0, 0.5))
    print("✅ Targets match hand-computed values")


@pytest.mark.unit
def test_unvoiced_phoneme_gets_zero_pitch(fixture_discourses):
    utt = fixture_discourses[0].utterances[1]
    _, targets = build_targets(utt, *_load(utt.id))
    assert targets.pitch == pytest.approx([0.0, math.log(180)])
    assert targets.energy == pytest.approx([0.5, 0.9])


@pytest.mark.unit
def test_separator_rule_reports_silences(fixture_discourses):
    utt = fixture_discourses[0].utterances[0]
    track, align, _ = _load(utt.id)
    separators = apply_separator_rule(utt, align, track)
    assert separators.positions == [2, 5]
    assert separators.is_silent == [False, True]
    assert separators.pitch == [0.0, 0.0]
    assert separators.energy == pytest.approx([0.0, 0.3])


@pytest.mark.unit
def test_silence_flags_recovered_from_targets(fixture_discourses):
    utt = fixture_discourses[0].utterances[0]
    marked, targets = build_targets(utt, *_load(utt.id))
    assert infer_silences(utt, targets).silent_mask == marked.silent_mask


@pytest.mark.unit
def test_alignment_label_mismatch_is_rejected(fixture_discourses):
    utt = fixture_discourses[0].utterances[0]
    track, align, rows = _load(utt.id)
    intervals = list(align.intervals)
    intervals[3] = AlignmentInterval(label="zh", start_frame=8, end_frame=10)
    with pytest.raises(AlignmentError) as excinfo:
        build_targets(utt, track, AlignmentTrack(utterance_id=utt.id, intervals=tuple(intervals)), rows)
    assert excinfo.value.index == 3
    print("✅ Misaligned phoneme rejected")


@pytest.mark.unit
def test_alignment_past_track_end_is_rejected(fixture_discourses):
    utt = fixture_discourses[0].utterances[1]
    track, align, rows = _load(utt.id)
    intervals = align.intervals[:2] + (AlignmentInterval(label="ao", start_frame=3, end_frame=40),)
    with pytest.raises(AlignmentError):
        build_targets(utt, track, AlignmentTrack(utterance_id=utt.id, intervals=intervals), rows)


@pytest.mark.unit
def test_double_silence_at_separator_is_rejected(fixture_discourses):
    utt = fixture_discourses[0].utterances[0]
    track, align, rows = _load(utt.id)
    intervals = list(align.intervals)
    intervals[5] = AlignmentInterval(label="silence", start_frame=13, end_frame=14)
    intervals.insert(6, AlignmentInterval(label="silence", start_frame=14, end_frame=16))
    with pytest.raises(AlignmentError):
        build_targets(utt, track, AlignmentTrack(utterance_id=utt.id, intervals=tuple(intervals)), rows)


@pytest.mark.unit
def test_lpe_rows_are_validated(fixture_discourses):
    utt = fixture_discourses[0].utterances[1]
    track, align, _ = _load(utt.id)
    with pytest.raises(LengthMismatchError):
        build_targets(utt, track, align, [(0.1, 0.1, 0.1)])
    with pytest.raises(ValidationFailure):
        build_targets(utt, track, align, [(0.1, 0.1, 0.1), (0.1, 1.5, 0.1)])
    with pytest.raises(ValidationFailure):
        build_targets(utt, track, align, [(0.1, 0.1, 0.1), (0.1, 0.1)])


@pytest.mark.unit
def test_feature_file_format():
    targets = PhonemeTargets(
        utterance_id="d0001-001",
        pitch=(-1e-12, 5.123456789012),
        energy=(0.0, 0.9),
        lpe=((0.0, 0.0, 0.0), (0.25, 0.5, 1.0)),
    )
    stream = io.StringIO()
    write_feature_file(targets, stream)
    assert stream.getvalue() == (
        "PROSO-FEAT v1 d0001-001 2\n"
        "0.000000000 0.000000000 0.000000000 0.000000000 0.000000000\n"
        "5.123456789 0.900000000 0.250000000 0.500000000 1.000000000\n"
    )
    parsed = read_feature_file(io.StringIO(stream.getvalue()))
    assert parsed.utterance_id == "d0001-001"
    assert parsed.pitch == (0.0, 5.123456789)
    print("✅ PROSO-FEAT written with 9 decimals")


@pytest.mark.unit
def test_feature_file_errors():
    with pytest.raises(FeatureFileError):
        read_feature_file(io.StringIO(""))
    with pytest.raises(FeatureFileError) as excinfo:
        read_feature_file(io.StringIO("PROSO-FEAT v2 u 0\n"))
    assert "version" in str(excinfo.value)
    with pytest.raises(FeatureFileError):
        read_feature_file(io.StringIO("PROSO-FEAT v1 u 2\n0 0 0 0 0\n"))
    with pytest.raises(FeatureFileError) as excinfo:
        read_feature_file(io.StringIO("PROSO-FEAT v1 u 1\n0 0 0 0\n"))
    assert excinfo.value.line_number == 2
    with pytest.raises(FeatureFileError):
        read_feature_file(io.StringIO("PROSO-FEAT v1 u 1\n0 0 0 nan 0\n"))
    with pytest.raises(FeatureFileError):
        read_alignment(io.StringIO("PROSO-ALIGN v1 u\nsilence 3 3\n"))


@pytest.mark.unit
def test_lpe_stream_accepts_feature_files():
    stream = io.StringIO()
    write_lpe_stream("u", [(0.1, 0.2, 0.3)], stream)
    assert read_lpe_stream(io.StringIO(stream.getvalue())) == ("u", [(0.1, 0.2, 0.3)])

    feat = "PROSO-FEAT v1 u 1\n4.0 1.0 0.100000000 0.200000000 0.300000000\n"
    assert read_lpe_stream(io.StringIO(feat)) == ("u", [(0.1, 0.2, 0.3)])
