"""
Test Word Encoder, Batching and Length Regulation

Vocabulary handling, toy and pretrained encoder contracts, padded batches,
and the length regulator against a naive replication oracle.
"""

import time

import numpy as np
import pytest
import torch
from pydantic import ValidationError

from prosody.batching import collate_utterances, regulation_index
from prosody.config import AdapterSpec
from prosody.corpus import WordKind, tokenize_and_separate
from prosody.encoder import (
    UNK_ID,
    EncoderConfig,
    ToyWordEncoder,
    Vocabulary,
    encode,
    load_pretrained_adapter,
)
from prosody.errors import CapabilityError, LengthMismatchError, UnknownSpeakerError
from prosody.features import infer_silences
from prosody.model_u import length_regulate

SYMBOLS = ["b", "p", "m", "f", "d", "t"]


def random_utterance(rng: np.random.Generator, index: int, max_words: int = 20, max_phonemes: int = 4):
    """Random annotated utterance with distinct CJK surfaces and scattered commas."""
    n = int(rng.integers(1, max_words + 1))
    pieces, pinyin = [], []
    for i in range(n):
        surface = chr(0x4E00 + i)
        length = int(rng.integers(1, max_phonemes + 1))
        pieces.append(surface)
        pinyin.append((surface, [SYMBOLS[j] for j in rng.integers(0, len(SYMBOLS), size=length)],
                       int(rng.integers(0, 6))))
        if rng.random() < 0.3:
            pieces.append("，")
    pieces.append("。")
    return tokenize_and_separate("".join(pieces), pinyin, f"d{index:04d}-000")


def replication_oracle(word_feats: torch.Tensor, utt) -> torch.Tensor:
    rows = []
    encoder_row = -1
    previous_lexical = None
    for word in utt.words:
        if word.kind is WordKind.SEPARATOR:
            rows.append(word_feats[previous_lexical])
            continue
        encoder_row += 1
        if word.kind is WordKind.LEXICAL:
            previous_lexical = encoder_row
            for _ in range(word.phoneme_length):
                rows.append(word_feats[encoder_row])
    return torch.stack(rows)


@pytest.mark.unit
def test_length_regulator_matches_oracle():
    rng = np.random.default_rng(2024)
    started = time.time()
    for index in range(1000):
        utt = random_utterance(rng, index)
        word_feats = torch.randn(len(utt.encoder_words), 5, dtype=torch.float64)
        regulated = length_regulate(word_feats, utt)
        assert torch.equal(regulated, replication_oracle(word_feats, utt))
        assert regulated.shape[0] == utt.num_phonemes == sum(utt.phoneme_lengths)
    assert time.time() - started < 10.0
    print("✅ Length regulator equals replication oracle on 1000 utterances")


@pytest.mark.unit
def test_regulation_index_for_separators_and_punctuation():
    pinyin = [("他", ["t", "a"], 1), ("说", ["sh", "uo"], 1), ("你好", ["n", "i", "h", "ao"], 3)]
    utt = tokenize_and_separate("他说“你好”。", pinyin)
    # encoder tokens: 他 0, 说 1, “ 2, 你好 3, ” 4, 。5
    assert regulation_index(utt) == [0, 0, 0, 1, 1, 1, 3, 3, 3, 3]


@pytest.mark.unit
def test_vocabulary_reserves_unknown_id(tmp_path, fixture_discourses):
    vocabulary = Vocabulary.from_discourses(fixture_discourses)
    assert vocabulary.tokens[0] == "<unk>"
    assert vocabulary.id("你好") != UNK_ID
    assert vocabulary.id("从未见过") == UNK_ID

    path = tmp_path / "vocab.txt"
    vocabulary.save(path)
    assert Vocabulary.load(path) == vocabulary

    utt = tokenize_and_separate("走。", [("走", ["z", "ou"], 3)])
    assert vocabulary.unk_rate([utt]) == pytest.approx(0.5)
    print("✅ Vocabulary round trip and unknown handling")


@pytest.mark.unit
@pytest.mark.parametrize("context", ["bag", "recurrent"])
def test_toy_encoder_shapes(fixture_discourses, context):
    vocabulary = Vocabulary.from_discourses(fixture_discourses)
    encoder = ToyWordEncoder(EncoderConfig(vocabulary=vocabulary.as_mapping(), d=6, r=4, context=context))
    utt = fixture_discourses[0].utterances[0]
    encoding = encode(utt, encoder, vocabulary)
    assert tuple(encoding.word_vectors.shape) == (len(utt.encoder_words), 6)
    assert tuple(encoding.utterance_vector.shape) == (4,)


@pytest.mark.unit
def test_recurrent_encoder_needs_even_width():
    with pytest.raises(ValidationError):
        EncoderConfig(vocabulary={"<unk>": 0}, d=5, context="recurrent")


@pytest.mark.unit
def test_unknown_adapter_provider_is_a_capability_error():
    config = EncoderConfig(vocabulary={"<unk>": 0}, d=4, r=4)
    assert isinstance(load_pretrained_adapter(None, config), ToyWordEncoder)
    with pytest.raises(CapabilityError):
        load_pretrained_adapter(AdapterSpec(provider="sentencepiece-magic", model_id="x"), config)


@pytest.mark.unit
def test_missing_pretrained_model_is_a_capability_error(monkeypatch):
    monkeypatch.setenv("HF_HUB_OFFLINE", "1")
    monkeypatch.setenv("TRANSFORMERS_OFFLINE", "1")
    config = EncoderConfig(vocabulary={"<unk>": 0}, d=4, r=4)
    with pytest.raises(CapabilityError):
        load_pretrained_adapter(AdapterSpec(provider="transformers", model_id="no-such-org/no-such-model"), config)
    print("✅ Missing pretrained encoder reported as a capability error")


@pytest.mark.unit
def test_collate_pads_and_masks(fixture_discourses):
    utterances = list(fixture_discourses[0].utterances)
    vocabulary = Vocabulary.from_discourses(fixture_discourses)
    inventory = ["/", "a", "ao", "h", "i", "n", "sh", "t", "uo"]
    index = {s: i for i, s in enumerate(inventory)}

    batch = collate_utterances(utterances, vocabulary, index, num_speakers=2, pad_to=12)
    assert batch.lengths.tolist() == [10, 2]
    assert tuple(batch.mask.shape) == (2, 12)
    assert batch.mask[0].sum() == 10 and batch.mask[1].sum() == 2
    assert batch.phoneme_ids[1, 2:].eq(0).all()
    assert batch.token_lengths.tolist() == [6, 2]
    assert batch.dialogue_flags[0].tolist() == [0, 0, 0, 1, 0, 0]
    assert not batch.has_targets

    with pytest.raises(LengthMismatchError):
        collate_utterances(utterances, vocabulary, index, num_speakers=2, pad_to=5)
    with pytest.raises(UnknownSpeakerError) as excinfo:
        collate_utterances(utterances, vocabulary, index, num_speakers=1)
    assert excinfo.value.known == [0]
    overridden = collate_utterances(utterances, vocabulary, index, num_speakers=1, speaker_override=0)
    assert overridden.speaker_ids.tolist() == [0, 0]
    print("✅ Batches padded with explicit masks")


@pytest.mark.unit
def test_lpe_mask_skips_non_silent_separators(fixture_discourses):
    from prosody.features import PhonemeTargets

    utt = fixture_discourses[0].utterances[0]
    rows = [(0.0,) * 3] * 10
    energy = [0.5] * 10
    energy[2] = 0.0
    targets = PhonemeTargets(utterance_id=utt.id, pitch=(0.0,) * 10, energy=tuple(energy), lpe=tuple(rows))
    marked = infer_silences(utt, targets)
    vocabulary = Vocabulary.from_discourses(fixture_discourses)
    index = {s: i for i, s in enumerate(["/", "a", "ao", "h", "i", "n", "sh", "t", "uo"])}
    batch = collate_utterances([marked], vocabulary, index, num_speakers=2, targets={utt.id: targets})
    assert batch.lpe_mask[0].tolist() == [True, True, False, True, True, True, True, True, True, True]
    assert batch.has_targets and tuple(batch.lpe.shape) == (1, 10, 3)
