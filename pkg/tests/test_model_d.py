"""
Test Discourse-level Prosody Model

LPE adjustment contraction against a loop oracle, the stage-1 freeze
contract, attention pooling and the stage-2 loss.
"""

import time

import numpy as np
import pytest
import torch

from prosody.errors import FrozenParameterError, LengthMismatchError, ValidationFailure
from prosody.model_d import (
    DiscourseProsodyModel,
    adjust_lpe,
    discourse_loss,
    tensor_digest,
    train_stage2_step,
)


def contraction_oracle(d_adj: np.ndarray, context: np.ndarray, lpe: np.ndarray, mask: np.ndarray) -> np.ndarray:
    r = d_adj.shape[0]
    m, n, _ = lpe.shape
    delta = np.zeros((m, n, 3))
    for u in range(m):
        for p in range(n):
            if not mask[u, p]:
                continue
            for k in range(3):
                total = 0.0
                for i in range(r):
                    for j in range(3):
                        total += d_adj[i, j, k] * context[u, i] * lpe[u, p, j]
                delta[u, p, k] = total
    return delta


@pytest.fixture
def discourse_model(make_micro_model, fixture_discourses):
    stage1 = make_micro_model(fixture_discourses)
    return DiscourseProsodyModel(stage1, stage1.config)


@pytest.fixture
def marked_discourse(fixture_discourses, fixture_prepared):
    utterances, targets = fixture_prepared
    return fixture_discourses[0].model_copy(update={"utterances": tuple(utterances)}), targets


@pytest.mark.unit
def test_adjustment_matches_loop_oracle():
    rng = np.random.default_rng(12)
    started = time.time()
    for _ in range(500):
        r, m, n = (int(rng.integers(1, hi + 1)) for hi in (4, 5, 8))
        d_adj = rng.normal(size=(r, 3, 3))
        context = rng.normal(size=(m, r))
        lpe = rng.uniform(size=(m, n, 3))
        lengths = rng.integers(1, n + 1, size=m)
        mask = np.arange(n)[None, :] < lengths[:, None]

        delta, final = adjust_lpe(torch.from_numpy(d_adj), torch.from_numpy(context),
                                  torch.from_numpy(lpe), torch.from_numpy(mask))
        expected = contraction_oracle(d_adj, context, lpe, mask)
        assert np.max(np.abs(delta.numpy() - expected)) < 1e-12
        assert np.max(np.abs(final.numpy() - (lpe + expected) * mask[..., None])) < 1e-12
    assert time.time() - started < 10.0
    print("✅ LPE adjustment equals loop oracle on 500 shapes")


@pytest.mark.unit
def test_adjustment_shape_checks():
    d_adj = torch.zeros(4, 3, 3, dtype=torch.float64)
    context = torch.zeros(2, 4, dtype=torch.float64)
    lpe = torch.zeros(2, 5, 3, dtype=torch.float64)
    mask = torch.ones(2, 5, dtype=torch.bool)
    with pytest.raises(LengthMismatchError):
        adjust_lpe(torch.zeros(4, 3, 2, dtype=torch.float64), context, lpe, mask)
    with pytest.raises(LengthMismatchError):
        adjust_lpe(d_adj, torch.zeros(2, 3, dtype=torch.float64), lpe, mask)
    with pytest.raises(LengthMismatchError):
        adjust_lpe(d_adj, context, torch.zeros(3, 5, 3, dtype=torch.float64), mask)
    with pytest.raises(LengthMismatchError):
        adjust_lpe(d_adj, context, lpe, torch.ones(2, 4, dtype=torch.bool))


@pytest.mark.unit
def test_stage1_is_frozen_on_construction(discourse_model):
    assert all(not p.requires_grad for p in discourse_model.stage1.parameters())
    assert all(p.requires_grad for p in discourse_model.stage2_parameters())
    names = [n for n, _ in discourse_model.stage2_named_parameters()]
    assert "adjustment" in names and not any(n.startswith("stage1.") for n in names)
    discourse_model.train()
    assert discourse_model.training and not discourse_model.stage1.training


@pytest.mark.unit
def test_optimizer_over_stage1_is_refused(discourse_model, marked_discourse):
    discourse, targets = marked_discourse
    batch = discourse_model.prepare_discourse(discourse, targets)
    optimizer = torch.optim.Adam(discourse_model.parameters(), lr=1e-3)
    with pytest.raises(FrozenParameterError):
        train_stage2_step([batch], discourse_model, optimizer)
    print("✅ Optimizer holding stage-1 tensors refused")


@pytest.mark.unit
def test_stage2_step_leaves_stage1_untouched(discourse_model, marked_discourse):
    discourse, targets = marked_discourse
    before = discourse_model.stage1_digest()
    adjustment = discourse_model.adjustment.detach().clone()
    optimizer = torch.optim.Adam(discourse_model.stage2_parameters(), lr=1e-2)
    for _ in range(3):
        batch = discourse_model.prepare_discourse(discourse, targets)
        loss = train_stage2_step([batch], discourse_model, optimizer)
        assert torch.isfinite(loss.total)
    assert discourse_model.stage1_digest() == before
    assert not torch.equal(adjustment, discourse_model.adjustment.detach())
    print("✅ Stage-2 steps leave stage-1 digest unchanged")


@pytest.mark.unit
def test_prepare_uses_stage1_inference_path(discourse_model, marked_discourse):
    discourse, targets = marked_discourse
    batch = discourse_model.prepare_discourse(discourse, targets)
    stage1 = discourse_model.stage1
    reference = stage1(stage1.collate(list(discourse.utterances)), "infer")
    assert torch.equal(batch.lpe_stage1, reference.lpe_hat)
    assert torch.equal(batch.utterance_vectors, reference.utterance_vectors)
    assert batch.style_label == 1
    assert batch.lpe_mask[0].tolist() == [True, True, False, True, True, True, True, True, True, True]


@pytest.mark.unit
def test_stage1_cache(discourse_model, marked_discourse):
    discourse, targets = marked_discourse
    discourse_model.use_cache = True
    first = discourse_model.prepare_discourse(discourse, targets)
    assert discourse_model.prepare_discourse(discourse, targets) is first
    assert discourse_model.prepare_discourse(discourse, targets, speaker_override=0) is not first


@pytest.mark.unit
def test_forward_and_attention(discourse_model, marked_discourse):
    discourse, targets = marked_discourse
    batch = discourse_model.prepare_discourse(discourse, targets)
    output = discourse_model(batch)
    assert tuple(output.context.shape) == (2, 4)
    assert tuple(output.lpe_final.shape) == tuple(batch.lpe_stage1.shape)
    assert float(output.attention_weights.sum()) == pytest.approx(1.0, abs=1e-12)
    assert tuple(output.style_logits.shape) == (2,)
    assert output.lpe_final[1, 2:].abs().sum() == 0

    exported = discourse_model.export(batch, output)
    assert [t.num_phonemes for t in exported] == [10, 2]
    assert exported[0].pitch == tuple(float(v) for v in batch.stage1_pitch[0, :10])


@pytest.mark.unit
def test_discourse_loss_padding_invariance(discourse_model, marked_discourse):
    discourse, targets = marked_discourse
    batch = discourse_model.prepare_discourse(discourse, targets)
    output = discourse_model(batch)
    reference = discourse_model.loss(batch, output)

    def pad(t, extra):
        shape = list(t.shape)
        shape[1] = extra
        return torch.cat([t, t.new_zeros(shape)], dim=1)

    padded_lpe = pad(output.lpe_final, 4)
    padded_targets = pad(batch.lpe_targets, 4)
    padded_mask = pad(batch.lpe_mask, 4)
    again = discourse_loss(padded_lpe, padded_targets, padded_mask, output.style_logits, batch.style_label)
    assert abs(float(again.total) - float(reference.total)) < 1e-12

    with pytest.raises(ValidationFailure):
        discourse_loss(padded_lpe, padded_targets, torch.zeros_like(padded_mask), output.style_logits, 0)
    print("✅ Discourse loss unchanged by masked padding")


@pytest.mark.unit
def test_tensor_digest_detects_changes():
    a = [("w", torch.zeros(3))]
    b = [("w", torch.tensor([0.0, 0.0, 1e-30]))]
    assert tensor_digest(a) == tensor_digest([("w", torch.zeros(3))])
    assert tensor_digest(a) != tensor_digest(b)


@pytest.mark.unit
def test_stage2_loss_decreases_on_one_discourse(discourse_model, marked_discourse):
    discourse, targets = marked_discourse
    batch = discourse_model.prepare_discourse(discourse, targets)
    optimizer = torch.optim.Adam(discourse_model.stage2_parameters(), lr=1e-2)
    first = float(train_stage2_step([batch], discourse_model, optimizer).total)
    for _ in range(49):
        last = float(train_stage2_step([batch], discourse_model, optimizer).total)
    assert last < first
    print(f"✅ Stage-2 loss {first:.4f} -> {last:.4f} over 50 steps")
