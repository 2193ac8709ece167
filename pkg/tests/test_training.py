"""
Test Two-stage Training

Corpus loading, stage-1 and stage-2 training runs at toy scale, determinism,
the freeze contract, config mismatches, divergence detection and checkpoints.
"""

import dataclasses
import shutil

import pytest
import torch

from prosody import training
from prosody.checkpoint import load_checkpoint, save_checkpoint
from prosody.config import ProsodyConfig
from prosody.errors import ConfigMismatchError, TrainingDivergedError, ValidationFailure
from prosody.model_d import DiscourseProsodyModel, tensor_digest
from prosody.model_u import LossBreakdown
from prosody.training import (
    HISTORY_COLUMNS,
    ProsodyCorpus,
    set_determinism,
    stage1_optimizer,
    stage2_optimizer,
    train_stage1,
    train_stage2,
)


@pytest.fixture
def stage1_run(synthetic_corpus, make_config, tmp_path):
    config = make_config()
    result = train_stage1(synthetic_corpus, config, out=tmp_path / "stage1.pt",
                          history_path=tmp_path / "stage1.history.csv")
    return config, result, tmp_path / "stage1.pt"


@pytest.mark.unit
def test_corpus_load(synthetic_corpus, synthetic_corpus_dir):
    assert len(synthetic_corpus.discourses) == 6
    assert len(synthetic_corpus.utterances) == 18
    assert set(synthetic_corpus.targets) == {u.id for u in synthetic_corpus.utterances}
    assert synthetic_corpus.num_styles == 2
    assert synthetic_corpus.phonemes[0] == "/"
    # separator silence flags recovered from the feature files
    for utt in synthetic_corpus.utterances:
        rows = synthetic_corpus.targets[utt.id].as_array()
        for k, phoneme in enumerate(utt.phonemes):
            if phoneme.is_separator:
                assert phoneme.is_silent == bool(rows[k].any())

    bare = synthetic_corpus_dir.parent / "bare"
    bare.mkdir()
    shutil.copy(synthetic_corpus_dir / "manifest.jsonl", bare / "manifest.jsonl")
    assert ProsodyCorpus.load(bare, require_targets=False).targets == {}
    with pytest.raises(ValidationFailure):
        ProsodyCorpus.load(bare)
    print("✅ Prepared corpus loaded")


@pytest.mark.integration
def test_stage1_training_run(stage1_run, synthetic_corpus):
    config, result, checkpoint_path = stage1_run
    assert list(result.history.columns) == HISTORY_COLUMNS
    assert len(result.history) == 2
    assert result.steps == 2 * 5  # 18 utterances in batches of 4
    assert checkpoint_path.is_file()
    assert (checkpoint_path.parent / "stage1.history.csv").is_file()
    assert result.history[HISTORY_COLUMNS[1:]].notna().all().all()

    loaded = load_checkpoint(checkpoint_path)
    assert loaded.stage == 1
    assert loaded.config_hash == config.config_hash()
    rebuilt = loaded.build_model()
    batch = result.model.collate(synthetic_corpus.utterances[:4])
    with torch.no_grad():
        assert torch.equal(rebuilt(batch, "infer").lpe_hat, result.model(batch, "infer").lpe_hat)
    print("✅ Stage-1 training and checkpoint round trip")


@pytest.mark.integration
def test_stage1_is_deterministic(synthetic_corpus, make_config, tmp_path):
    config = make_config()
    train_stage1(synthetic_corpus, config, history_path=tmp_path / "a.csv")
    train_stage1(synthetic_corpus, config, history_path=tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    print("✅ Same seed gives identical loss histories")


@pytest.mark.unit
def test_set_determinism_reseeds_everything():
    first = torch.randperm(10, generator=set_determinism(5)).tolist()
    second = torch.randperm(10, generator=set_determinism(5)).tolist()
    assert first == second


@pytest.mark.integration
def test_stage2_keeps_stage1_frozen(stage1_run, synthetic_corpus, tmp_path):
    config, _, checkpoint_path = stage1_run
    stage1 = load_checkpoint(checkpoint_path)
    result = train_stage2(synthetic_corpus, stage1, config, out=tmp_path / "stage2.pt",
                          history_path=tmp_path / "stage2.history.csv")
    assert result.digests["stage1_before"] == result.digests["stage1_after"]
    assert (result.history["pitch_mse"] == 0.0).all()
    assert (result.history["energy_mse"] == 0.0).all()

    stage2 = load_checkpoint(tmp_path / "stage2.pt")
    assert stage2.stage == 2
    for name, tensor in stage1.stage1_state.items():
        assert torch.equal(tensor, stage2.stage1_state[name])
    assert "adjustment" in stage2.stage2_state
    assert not any(name.startswith("stage1.") for name in stage2.stage2_state)
    print("✅ Stage-2 run leaves stage-1 tensors byte-identical")


@pytest.mark.unit
def test_stage2_refuses_mismatched_inputs(stage1_run, synthetic_corpus, make_config, tmp_path):
    config, result, checkpoint_path = stage1_run
    stage1 = load_checkpoint(checkpoint_path)

    wider = config.model_copy(update={"model": config.model.model_copy(update={"d": 10})})
    with pytest.raises(ConfigMismatchError):
        train_stage2(synthetic_corpus, stage1, wider)

    foreign = dataclasses.replace(stage1, corpus_signature="0" * 64)
    with pytest.raises(ConfigMismatchError):
        train_stage2(synthetic_corpus, foreign, config)

    stage2_like = dataclasses.replace(stage1, stage=2)
    with pytest.raises(ConfigMismatchError):
        train_stage2(synthetic_corpus, stage2_like, config)


@pytest.mark.unit
def test_divergence_names_the_component(synthetic_corpus, make_config, monkeypatch):
    real_loss = training.utterance_loss

    def poisoned(output, batch, lambdas, model=None):
        loss = real_loss(output, batch, lambdas, model=model)
        bad = loss.components[0] * float("nan")
        return LossBreakdown(total=loss.total + bad, components=(bad,) + loss.components[1:], names=loss.names)

    monkeypatch.setattr(training, "utterance_loss", poisoned)
    with pytest.raises(TrainingDivergedError) as excinfo:
        train_stage1(synthetic_corpus, make_config())
    assert excinfo.value.tensor_name == "pitch_mse"
    assert excinfo.value.step == 0
    print("✅ Divergence reported with tensor name and step")


@pytest.mark.unit
def test_stage1_needs_targets(synthetic_corpus, make_config):
    bare = ProsodyCorpus(synthetic_corpus.discourses, {})
    with pytest.raises(ValidationFailure):
        train_stage1(bare, make_config())


@pytest.mark.unit
def test_checkpoint_validation(tmp_path, make_micro_model, fixture_discourses, make_config):
    with pytest.raises(ValidationFailure):
        load_checkpoint(tmp_path / "missing.pt")

    garbage = tmp_path / "garbage.pt"
    garbage.write_bytes(b"not a checkpoint")
    with pytest.raises(ValidationFailure):
        load_checkpoint(garbage)

    torch.save({"format": "OTHER", "version": 1}, tmp_path / "other.pt")
    with pytest.raises(ValidationFailure):
        load_checkpoint(tmp_path / "other.pt")

    model = make_micro_model(fixture_discourses)
    config = ProsodyConfig(model=model.config)
    path = tmp_path / "ok.pt"
    save_checkpoint(path, model, config)
    assert load_checkpoint(path).build_model().config == model.config
    payload = torch.load(path, weights_only=True)
    payload["version"] = 2
    torch.save(payload, tmp_path / "v2.pt")
    with pytest.raises(ValidationFailure) as excinfo:
        load_checkpoint(tmp_path / "v2.pt")
    assert "version" in str(excinfo.value)


@pytest.mark.unit
def test_checkpoint_refuses_mismatched_config(tmp_path, make_micro_model, fixture_discourses, make_config):
    model = make_micro_model(fixture_discourses)
    with pytest.raises(ConfigMismatchError):
        save_checkpoint(tmp_path / "mismatch.pt", model, make_config())
    assert not (tmp_path / "mismatch.pt").exists()


@pytest.mark.unit
def test_parameter_groups_step_at_their_learning_rates(make_micro_model, fixture_discourses, make_config):
    config = make_config(stage1={"lr_encoder": 1e-4, "lr_rest": 1e-2}, stage2={"lr_stage2": 3e-3})
    stage1_train, stage2_train = config.train_config(1), config.train_config(2)

    model = make_micro_model(fixture_discourses)
    encoder_ids = {id(p) for p in model.encoder.parameters()}
    assert encoder_ids
    before = {name: p.detach().clone() for name, p in model.named_parameters()}
    optimizer = stage1_optimizer(model, stage1_train)
    for parameter in model.parameters():
        parameter.grad = torch.ones_like(parameter)
    optimizer.step()
    # a first Adam step under a constant gradient moves every element by lr
    for name, parameter in model.named_parameters():
        expected = stage1_train.lr_encoder if id(parameter) in encoder_ids else stage1_train.lr_rest
        step = (before[name] - parameter.detach()).abs()
        assert torch.allclose(step, torch.full_like(step, expected), rtol=1e-6, atol=0.0), name

    discourse_model = DiscourseProsodyModel(model, model.config)
    optimizer = stage2_optimizer(discourse_model, stage2_train)
    in_optimizer = {id(p) for group in optimizer.param_groups for p in group["params"]}
    assert in_optimizer.isdisjoint(id(p) for p in model.parameters())
    before = {name: p.detach().clone() for name, p in discourse_model.stage2_named_parameters()}
    for parameter in discourse_model.stage2_parameters():
        parameter.grad = torch.ones_like(parameter)
    optimizer.step()
    for name, parameter in discourse_model.stage2_named_parameters():
        step = (before[name] - parameter.detach()).abs()
        assert torch.allclose(step, torch.full_like(step, stage2_train.lr_stage2), rtol=1e-6, atol=0.0), name
    print("✅ Encoder, stage-1 and stage-2 groups step at lr_encoder, lr_rest and lr_stage2")


@pytest.mark.integration
def test_stage2_zero_epochs_keeps_initialization(stage1_run, synthetic_corpus, make_config):
    _, _, checkpoint_path = stage1_run
    stage1 = load_checkpoint(checkpoint_path)
    config = make_config(stage2={"epochs": 0})
    result = train_stage2(synthetic_corpus, stage1, config)
    assert result.steps == 0 and len(result.history) == 0

    set_determinism(config.train_config(2).seed)
    fresh = DiscourseProsodyModel(stage1.build_stage1(), config.model)
    assert tensor_digest(result.model.stage2_named_parameters()) == tensor_digest(fresh.stage2_named_parameters())
    print("✅ Zero stage-2 epochs leave the stage-2 tensors at their initialization")
