"""
Prosody Toolkit Test Configuration

Shared fixtures and configuration for all tests.
"""

import shutil
import sys
from pathlib import Path
from typing import Dict

import pytest

# backend/ holds main.py and the prosody package
sys.path.insert(0, str(Path(__file__).parent.parent / "backend"))

from prosody.config import ProsodyConfig  # noqa: E402
from prosody.corpus import parse_manifest  # noqa: E402
from prosody.encoder import Vocabulary  # noqa: E402
from prosody.model_u import UtteranceProsodyModel  # noqa: E402

# Test fixtures directory
TEST_DATA_DIR = Path(__file__).parent / "fixtures"
FIXTURE_CORPUS = TEST_DATA_DIR / "corpus"

# Small synthetic corpora keep the unit suite fast
TINY_GENERATOR_OPTIONS: Dict = {
    "num_discourses": 6,
    "utterances_per_discourse": 3,
    "vocab_size": 12,
    "phoneme_alphabet_size": 6,
    "min_words": 2,
    "max_words": 4,
    "seed": 7,
}


def pytest_configure(config):
    """Add custom markers."""
    config.addinivalue_line("markers", "unit: Unit tests")
    config.addinivalue_line("markers", "integration: Integration tests")
    config.addinivalue_line("markers", "slow: Slow running tests")


def tiny_config(**train_overrides) -> ProsodyConfig:
    """Toy widths and two short epochs per stage."""
    stage1 = {"epochs": 2, "batch_size": 4, "lr_encoder": 1e-3}
    stage2 = {"epochs": 2, "batch_size": 2}
    stage1.update(train_overrides.get("stage1", {}))
    stage2.update(train_overrides.get("stage2", {}))
    return ProsodyConfig.model_validate({
        "seed": 11,
        "model": {"d": 8, "r": 8, "classifier_hidden": 8},
        "train": {"stage1": stage1, "stage2": stage2},
    })


@pytest.fixture
def fixture_corpus_dir(tmp_path) -> Path:
    """Writable copy of the hand-built two-utterance corpus."""
    target = tmp_path / "raw"
    shutil.copytree(FIXTURE_CORPUS, target)
    return target


@pytest.fixture
def fixture_discourses():
    with open(FIXTURE_CORPUS / "manifest.jsonl", encoding="utf-8") as handle:
        return parse_manifest(handle)


@pytest.fixture
def synthetic_corpus_dir(tmp_path) -> Path:
    """A freshly generated tiny word_dependent corpus."""
    from prosody.synthgen import GeneratorSpec, generate

    out = tmp_path / "synthetic"
    generate(GeneratorSpec(**TINY_GENERATOR_OPTIONS), out)
    return out


@pytest.fixture
def synthetic_corpus(synthetic_corpus_dir):
    from prosody.training import ProsodyCorpus

    return ProsodyCorpus.load(synthetic_corpus_dir)


@pytest.fixture
def train_config() -> ProsodyConfig:
    return tiny_config()


def micro_model(discourses, dtype: str = "float64", num_speakers: int = 2, num_styles: int = 2,
                **model_overrides) -> UtteranceProsodyModel:
    """Float64 stage-1 model with tiny widths built around the given discourses."""
    from prosody.corpus import phoneme_inventory

    fields = {"d": 4, "r": 4, "classifier_hidden": 3, "predictor_layers": 1, "dtype": dtype}
    fields.update(model_overrides)
    config = ProsodyConfig.model_validate({"model": fields}).model
    return UtteranceProsodyModel(
        config,
        Vocabulary.from_discourses(discourses),
        phoneme_inventory(discourses),
        num_speakers,
        num_styles,
    )


@pytest.fixture
def make_micro_model():
    return micro_model


@pytest.fixture
def make_config():
    return tiny_config


@pytest.fixture
def fixture_prepared(fixture_discourses):
    """(silence-marked utterances, targets by utterance id) for the hand-built corpus."""
    from prosody.features import build_targets, read_alignment, read_frame_track, read_lpe_stream

    utterances, targets = [], {}
    for utt in fixture_discourses[0].utterances:
        with open(FIXTURE_CORPUS / "frames" / f"{utt.id}.frames", encoding="utf-8") as handle:
            track = read_frame_track(handle)
        with open(FIXTURE_CORPUS / "align" / f"{utt.id}.align", encoding="utf-8") as handle:
            align = read_alignment(handle)
        with open(FIXTURE_CORPUS / "lpe" / f"{utt.id}.lpe", encoding="utf-8") as handle:
            _, rows = read_lpe_stream(handle)
        marked, utt_targets = build_targets(utt, track, align, rows)
        utterances.append(marked)
        targets[utt.id] = utt_targets
    return utterances, targets
