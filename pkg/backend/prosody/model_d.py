"""
Discourse-level prosody model (stage 2)

Runs on top of a frozen stage-1 model. For every discourse:
1. Stage-1 utterance vectors are contextualized by a bidirectional LSTM (W)
2. Stage-1 LPE is adjusted by a trainable r x 3 x 3 tensor contraction
   delta[u, p, k] = sum_r sum_j D[r, j, k] * W[u, r] * lpe[u, p, j]
3. W is pooled with additive attention into a discourse vector
4. An MLP (same shape as the stage-1 classifier, fresh weights) predicts the
   discourse style
Only the stage-2 tensors are ever updated.
"""

import hashlib
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import structlog
import torch
import torch.nn.functional as F
from torch import nn

from .config import ModelConfig
from .corpus import Discourse
from .errors import FrozenParameterError, LengthMismatchError, ValidationFailure
from .features import LPE_DIM, PhonemeTargets
from .model_u import INIT_RANGE, LossBreakdown, StyleClassifier, UtteranceProsodyModel, _masked_mse, init_weights

logger = structlog.get_logger(__name__)

DEFAULT_STAGE2_LAMBDAS = (1.0, 1.0)


@dataclass
class DiscourseBatch:
    discourse_id: str
    utterance_ids: List[str]
    lpe_stage1: torch.Tensor          # m x N_max x 3, zero at padding
    mask: torch.Tensor                # m x N_max
    lpe_mask: torch.Tensor            # m x N_max, positions scored by the LPE loss
    utterance_vectors: torch.Tensor   # m x r
    style_label: int
    lengths: torch.Tensor             # m
    lpe_targets: Optional[torch.Tensor] = None  # m x N_max x 3
    stage1_pitch: Optional[torch.Tensor] = None   # m x N_max, target units
    stage1_energy: Optional[torch.Tensor] = None  # m x N_max, target units
    stage1_style_logits: Optional[torch.Tensor] = None  # m x S

    @property
    def num_utterances(self) -> int:
        return len(self.utterance_ids)


@dataclass
class DmpmOutput:
    delta: torch.Tensor               # m x N x 3
    lpe_final: torch.Tensor           # m x N x 3
    context: torch.Tensor             # m x r (W)
    attention_weights: torch.Tensor   # m
    discourse_vector: torch.Tensor    # r
    style_logits: torch.Tensor        # S


class ContextEncoder(nn.Module):
    """Bidirectional LSTM over the m utterance vectors of one discourse."""

    def __init__(self, r: int):
        super().__init__()
        if r % 2:
            raise ValidationFailure(f"context encoder needs an even r, got {r}")
        self.rnn = nn.LSTM(r, r // 2, batch_first=True, bidirectional=True)

    def forward(self, utterance_vectors: torch.Tensor) -> torch.Tensor:
        output, _ = self.rnn(utterance_vectors.unsqueeze(0))
        return output[0]


class AdditiveAttention(nn.Module):
    """score_u = v . tanh(A w_u + b); weights = softmax(scores)."""

    def __init__(self, r: int, attention_size: int):
        super().__init__()
        self.projection = nn.Linear(r, attention_size)
        self.score = nn.Linear(attention_size, 1, bias=False)

    def forward(self, context: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        scores = self.score(torch.tanh(self.projection(context))).squeeze(-1)
        weights = torch.softmax(scores, dim=0)
        return weights @ context, weights


def contextualize(utterance_vectors: torch.Tensor, params: "DiscourseProsodyModel") -> torch.Tensor:
    """m x r utterance vectors -> m x r context-fused features W."""
    if utterance_vectors.dim() != 2 or utterance_vectors.shape[0] < 1:
        raise ValidationFailure(f"expected an m x r matrix with m >= 1, got {tuple(utterance_vectors.shape)}")
    return params.context_encoder(utterance_vectors)


def adjust_lpe(
    d_adj: torch.Tensor, context: torch.Tensor, lpe_stage1: torch.Tensor, mask: torch.Tensor
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Context adjustment of stage-1 LPE.

    Returns (delta, lpe_stage1 + delta); both are zero at masked positions.

    Raises:
        LengthMismatchError: any operand has an inconsistent shape
    """
    r = d_adj.shape[0]
    if d_adj.dim() != 3 or d_adj.shape[1:] != (LPE_DIM, LPE_DIM):
        raise LengthMismatchError(f"D_adj must be r x {LPE_DIM} x {LPE_DIM}, got {tuple(d_adj.shape)}")
    if context.dim() != 2 or context.shape[1] != r:
        raise LengthMismatchError(f"W must be m x {r}, got {tuple(context.shape)}")
    m = context.shape[0]
    if lpe_stage1.dim() != 3 or lpe_stage1.shape[0] != m or lpe_stage1.shape[2] != LPE_DIM:
        raise LengthMismatchError(f"stage-1 LPE must be {m} x N x {LPE_DIM}, got {tuple(lpe_stage1.shape)}")
    if tuple(mask.shape) != tuple(lpe_stage1.shape[:2]):
        raise LengthMismatchError(f"mask {tuple(mask.shape)} does not match LPE {tuple(lpe_stage1.shape[:2])}")

    weights = mask.unsqueeze(-1).to(lpe_stage1.dtype)
    delta = torch.einsum("rjk,ur,upj->upk", d_adj, context, lpe_stage1) * weights
    return delta, (lpe_stage1 + delta) * weights


def pool_discourse(context: torch.Tensor, params: "DiscourseProsodyModel") -> Tuple[torch.Tensor, torch.Tensor]:
    """Attention pooling of W into (discourse vector, weights over the m utterances)."""
    return params.attention(context)


def discourse_loss(
    lpe_final: torch.Tensor,
    lpe_targets: torch.Tensor,
    mask: torch.Tensor,
    style_logits: torch.Tensor,
    style_label: int,
    lambdas: Sequence[float] = DEFAULT_STAGE2_LAMBDAS,
) -> LossBreakdown:
    """lambda_lpe * masked MSE(adjusted LPE) + lambda_gse * CE(discourse style)."""
    if not bool(mask.any()):
        raise ValidationFailure("discourse loss over an empty mask")
    if lpe_targets.shape != lpe_final.shape:
        raise LengthMismatchError(f"targets {tuple(lpe_targets.shape)} vs predictions {tuple(lpe_final.shape)}")
    lpe_mse = _masked_mse(lpe_final, lpe_targets, mask)
    label = torch.tensor([style_label], dtype=torch.long, device=style_logits.device)
    style_ce = F.cross_entropy(style_logits.unsqueeze(0), label)
    total = lambdas[0] * lpe_mse + lambdas[1] * style_ce
    return LossBreakdown(total=total, components=(lpe_mse, style_ce), names=("lpe_mse", "style_ce"))


def tensor_digest(tensors: Iterable[Tuple[str, torch.Tensor]]) -> str:
    """sha256 over names and raw bytes, used to prove the stage-1 tensors never change."""
    digest = hashlib.sha256()
    for name, tensor in tensors:
        digest.update(name.encode("utf-8"))
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


class DiscourseProsodyModel(nn.Module):
    """
    Stage-2 model wrapping a frozen stage-1 model.

    Trainable blocks: context encoder, adjustment tensor D_adj, additive
    attention, discourse style classifier.
    """

    def __init__(self, stage1: UtteranceProsodyModel, config: ModelConfig):
        super().__init__()
        self.stage1 = stage1
        self.freeze_stage1()
        r = config.r
        self.context_encoder = ContextEncoder(r)
        self.adjustment = nn.Parameter(torch.empty(r, LPE_DIM, LPE_DIM, dtype=stage1.dtype))
        self.attention = AdditiveAttention(r, r)
        self.discourse_classifier = StyleClassifier(r, config.classifier_hidden, stage1.num_styles)
        self._stage1_cache: Dict[str, DiscourseBatch] = {}
        self.use_cache = False

        for module in (self.context_encoder, self.attention, self.discourse_classifier):
            init_weights(module)
        nn.init.uniform_(self.adjustment, -INIT_RANGE, INIT_RANGE)
        self.to(stage1.dtype)

    @property
    def dtype(self) -> torch.dtype:
        return self.adjustment.dtype

    # --- freeze contract --------------------------------------------------------------------

    def freeze_stage1(self) -> None:
        for parameter in self.stage1.parameters():
            parameter.requires_grad_(False)
        self.stage1.eval()

    def train(self, mode: bool = True) -> "DiscourseProsodyModel":
        super().train(mode)
        self.stage1.eval()
        return self

    def stage1_digest(self) -> str:
        return tensor_digest(self.stage1.state_dict().items())

    def stage2_named_parameters(self) -> List[Tuple[str, nn.Parameter]]:
        return [(n, p) for n, p in self.named_parameters() if not n.startswith("stage1.")]

    def stage2_parameters(self) -> List[nn.Parameter]:
        return [p for _, p in self.stage2_named_parameters()]

    def check_frozen(self, optimizer: Optional[torch.optim.Optimizer] = None) -> None:
        """Raise FrozenParameterError if any stage-1 tensor could be updated."""
        frozen_ids = {id(p) for p in self.stage1.parameters()}
        for name, parameter in self.stage1.named_parameters():
            if parameter.requires_grad or parameter.grad is not None:
                raise FrozenParameterError(f"stage-1 tensor '{name}' is not frozen")
        if optimizer is not None:
            for group in optimizer.param_groups:
                if any(id(p) in frozen_ids for p in group["params"]):
                    raise FrozenParameterError("optimizer holds frozen stage-1 tensors")

    # --- stage-1 inputs ---------------------------------------------------------------------

    def prepare_discourse(
        self,
        discourse: Discourse,
        targets: Optional[Dict[str, PhonemeTargets]] = None,
        speaker_override: Optional[int] = None,
    ) -> DiscourseBatch:
        """Run the frozen stage-1 model (inference path) over every utterance of a discourse."""
        if self.use_cache and speaker_override is None and discourse.id in self._stage1_cache:
            return self._stage1_cache[discourse.id]

        with torch.no_grad():
            batch = self.stage1.collate(list(discourse.utterances), targets, speaker_override=speaker_override)
            output = self.stage1(batch, "infer")
            pitch, energy = self.stage1.denormalize(output.pitch_hat, output.energy_hat)

        prepared = DiscourseBatch(
            discourse_id=discourse.id,
            utterance_ids=batch.utterance_ids,
            lpe_stage1=output.lpe_hat.detach(),
            mask=batch.mask,
            lpe_mask=batch.mask & batch.lpe_mask,
            utterance_vectors=output.utterance_vectors.detach(),
            style_label=discourse.style_label,
            lengths=batch.lengths,
            lpe_targets=batch.lpe,
            stage1_pitch=pitch.detach(),
            stage1_energy=energy.detach(),
            stage1_style_logits=output.style_logits.detach(),
        )
        if self.use_cache and speaker_override is None:
            self._stage1_cache[discourse.id] = prepared
        return prepared

    # --- forward ----------------------------------------------------------------------------

    def forward(self, batch: DiscourseBatch) -> DmpmOutput:
        context = contextualize(batch.utterance_vectors, self)
        delta, lpe_final = adjust_lpe(self.adjustment, context, batch.lpe_stage1, batch.mask)
        discourse_vector, weights = pool_discourse(context, self)
        style_logits = self.discourse_classifier(discourse_vector)
        return DmpmOutput(
            delta=delta,
            lpe_final=lpe_final,
            context=context,
            attention_weights=weights,
            discourse_vector=discourse_vector,
            style_logits=style_logits,
        )

    def loss(self, batch: DiscourseBatch, output: DmpmOutput, lambdas: Sequence[float] = DEFAULT_STAGE2_LAMBDAS) -> LossBreakdown:
        if batch.lpe_targets is None:
            raise ValidationFailure(f"discourse {batch.discourse_id} has no LPE targets")
        return discourse_loss(output.lpe_final, batch.lpe_targets, batch.lpe_mask,
                              output.style_logits, batch.style_label, lambdas)

    def export(self, batch: DiscourseBatch, output: DmpmOutput) -> List[PhonemeTargets]:
        """Stage-1 pitch/energy with context-adjusted LPE, clamped to [0, 1]."""
        lpe = output.lpe_final.detach().clamp(0.0, 1.0)
        exported = []
        for u, utterance_id in enumerate(batch.utterance_ids):
            n = int(batch.lengths[u])
            exported.append(PhonemeTargets(
                utterance_id=utterance_id,
                pitch=tuple(float(v) for v in batch.stage1_pitch[u, :n]),
                energy=tuple(float(v) for v in batch.stage1_energy[u, :n]),
                lpe=tuple(tuple(float(v) for v in row) for row in lpe[u, :n]),
            ))
        return exported


def train_stage2_step(
    batches: Sequence[DiscourseBatch],
    model: DiscourseProsodyModel,
    optimizer: torch.optim.Optimizer,
    lambdas: Sequence[float] = DEFAULT_STAGE2_LAMBDAS,
    clip_grad_norm: Optional[float] = None,
) -> LossBreakdown:
    """
    One optimizer step over a group of discourses (mean of per-discourse losses).

    Raises:
        FrozenParameterError: the optimizer or autograd would touch stage-1 tensors
    """
    if not batches:
        raise ValidationFailure("empty stage-2 batch")
    model.check_frozen(optimizer)
    model.train()
    optimizer.zero_grad()

    losses = [model.loss(b, model(b), lambdas) for b in batches]
    total = torch.stack([l.total for l in losses]).mean()
    components = tuple(torch.stack([l.components[i] for l in losses]).mean() for i in range(2))
    total.backward()

    model.check_frozen()
    if clip_grad_norm is not None:
        torch.nn.utils.clip_grad_norm_(model.stage2_parameters(), clip_grad_norm)
    optimizer.step()
    return LossBreakdown(total=total.detach(), components=tuple(c.detach() for c in components),
                         names=losses[0].names)
