"""
Utterance-level multi-scale prosody model (stage 1)

Word encodings plus dialogue embeddings are expanded to phoneme length by the
length regulator, fused with phoneme, tone and speaker embeddings, and fed to
two predictors:
1. PE predictor: phoneme-level pitch and energy
2. LPE predictor: 3-dim LPE from the fused features concatenated with pitch
   and energy (ground truth while training, predictions at inference)
An MLP classifies the utterance vector into a style label. The loss is the
weighted sum of three masked MSE terms and one cross-entropy term.
"""

from dataclasses import dataclass
from typing import List, Literal, Optional, Sequence, Tuple

import structlog
import torch
import torch.nn.functional as F
from pydantic import BaseModel
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .batching import UtteranceBatch, collate_utterances, regulation_index
from .config import ModelConfig
from .corpus import MAX_TONE, Utterance
from .encoder import EncoderConfig, Vocabulary, WordEncoding, load_pretrained_adapter
from .errors import LengthMismatchError, UnknownSpeakerError, ValidationFailure
from .features import LPE_DIM, PhonemeTargets

logger = structlog.get_logger(__name__)

DEFAULT_LAMBDAS = (0.05, 0.0025, 1.0, 1.0)
INIT_RANGE = 0.1

Mode = Literal["train", "infer"]


class ModelWiring(BaseModel):
    """Which input scales feed the model (ablations switch them off)."""
    use_word: bool = True
    use_phn: bool = True
    use_pe: bool = True


class ProsodyPredictor(nn.Module):
    """Stacked (bi)LSTM over the phoneme sequence followed by a linear head."""

    def __init__(self, input_size: int, hidden: int, output_size: int, num_layers: int = 2, bidirectional: bool = True):
        super().__init__()
        self.input_size = input_size
        self.rnn = nn.LSTM(input_size, hidden, num_layers=num_layers, batch_first=True, bidirectional=bidirectional)
        self.head = nn.Linear(hidden * (2 if bidirectional else 1), output_size)

    def forward(self, inputs: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        if inputs.shape[-1] != self.input_size:
            raise LengthMismatchError(f"predictor expects width {self.input_size}, got {inputs.shape[-1]}")
        packed = pack_padded_sequence(inputs, lengths.cpu(), batch_first=True, enforce_sorted=False)
        output, _ = self.rnn(packed)
        output, _ = pad_packed_sequence(output, batch_first=True, total_length=inputs.shape[1])
        return self.head(output)


class StyleClassifier(nn.Module):
    """Two-layer MLP from an r-dim vector to style logits."""

    def __init__(self, input_size: int, hidden: int, num_styles: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(input_size, hidden), nn.Tanh(), nn.Linear(hidden, num_styles))

    def forward(self, vectors: torch.Tensor) -> torch.Tensor:
        return self.net(vectors)


def init_weights(module: nn.Module) -> None:
    """Uniform(-0.1, 0.1) embeddings and linear weights, orthogonal recurrent weights, zero biases."""
    if getattr(module, "is_pretrained", False):
        # pretrained backbones keep their weights; only the projections are fresh
        init_weights(module.word_projection)
        init_weights(module.utterance_projection)
        return
    if isinstance(module, (nn.Embedding, nn.Linear)):
        nn.init.uniform_(module.weight, -INIT_RANGE, INIT_RANGE)
        if getattr(module, "bias", None) is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LSTM):
        for name, parameter in module.named_parameters():
            if name.startswith("weight_hh"):
                for gate in parameter.data.chunk(4, dim=0):
                    nn.init.orthogonal_(gate)
            elif name.startswith("weight_ih"):
                nn.init.uniform_(parameter, -INIT_RANGE, INIT_RANGE)
            else:
                nn.init.zeros_(parameter)
    for child in module.children():
        init_weights(child)


def _masked_mse(prediction: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    weights = mask.to(prediction.dtype)
    while weights.dim() < prediction.dim():
        weights = weights.unsqueeze(-1)
    weights = weights.expand_as(prediction)
    count = weights.sum()
    if count == 0:
        return prediction.new_zeros(())
    return ((prediction - target) ** 2 * weights).sum() / count


@dataclass
class UmpmOutput:
    pitch_hat: torch.Tensor          # B x N
    energy_hat: torch.Tensor         # B x N
    lpe_hat: torch.Tensor            # B x N x 3, unclamped
    style_logits: torch.Tensor       # B x S
    utterance_vectors: torch.Tensor  # B x r
    mask: torch.Tensor               # B x N
    lengths: torch.Tensor            # B

    def features(self) -> torch.Tensor:
        """B x N x 5 per-phoneme vector: pitch, energy, lpe1..3."""
        return torch.cat([self.pitch_hat.unsqueeze(-1), self.energy_hat.unsqueeze(-1), self.lpe_hat], dim=-1)


@dataclass
class LossBreakdown:
    total: torch.Tensor
    components: Tuple[torch.Tensor, ...]
    names: Tuple[str, ...]

    def as_floats(self) -> dict:
        values = {name: float(c.detach()) for name, c in zip(self.names, self.components)}
        values["total"] = float(self.total.detach())
        return values


class UtteranceProsodyModel(nn.Module):
    """
    Stage-1 model.

    Tensor blocks:
    1. encoder (word-level text encoder, its own learning rate)
    2. dialogue / phoneme / tone / speaker embedding tables (+ optional style table)
    3. PE predictor and LPE predictor
    4. utterance style classifier
    """

    def __init__(
        self,
        config: ModelConfig,
        vocabulary: Vocabulary,
        phonemes: Sequence[str],
        num_speakers: int,
        num_styles: int,
        wiring: Optional[ModelWiring] = None,
    ):
        super().__init__()
        if num_styles < 2:
            raise ValidationFailure(f"need at least 2 styles, got {num_styles}")
        self.config = config
        self.wiring = wiring or ModelWiring()
        self.vocabulary = vocabulary
        self.phonemes = list(phonemes)
        self.phoneme_index = {s: i for i, s in enumerate(self.phonemes)}
        self.num_speakers = num_speakers
        self.num_styles = num_styles
        d, r, hidden = config.d, config.r, config.hidden

        encoder_config = EncoderConfig(vocabulary=vocabulary.as_mapping(), d=d, r=r, context=config.context)
        self.encoder = load_pretrained_adapter(config.adapter, encoder_config)
        self.dialogue_embedding = nn.Embedding(2, d)
        self.phoneme_embedding = nn.Embedding(len(self.phonemes), d)
        self.tone_embedding = nn.Embedding(MAX_TONE + 1, d)
        self.speaker_embedding = nn.Embedding(num_speakers, d)
        self.style_embedding = nn.Embedding(num_styles, d) if config.use_style_embedding else None

        layers = config.predictor_layers
        self.pe_predictor = ProsodyPredictor(d, hidden, 2, layers) if self.wiring.use_pe else None
        lpe_input = d + 2 if self.wiring.use_pe else d
        self.lpe_predictor = ProsodyPredictor(lpe_input, hidden, LPE_DIM, layers)
        self.style_classifier = StyleClassifier(r, config.classifier_hidden, num_styles)

        # pitch mean/std, energy mean/std; identity unless normalize_acoustics is set
        self.register_buffer("acoustic_stats", torch.tensor([0.0, 1.0, 0.0, 1.0]))
        init_weights(self)
        if config.dtype == "float64":
            self.double()

    @property
    def dtype(self) -> torch.dtype:
        return self.dialogue_embedding.weight.dtype

    # --- acoustic normalization -------------------------------------------------------------

    def set_acoustic_stats(self, pitch_mean: float, pitch_std: float, energy_mean: float, energy_std: float) -> None:
        self.acoustic_stats.copy_(torch.tensor([pitch_mean, max(pitch_std, 1e-8), energy_mean, max(energy_std, 1e-8)]))

    def normalize(self, pitch: torch.Tensor, energy: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        if not self.config.normalize_acoustics:
            return pitch, energy
        s = self.acoustic_stats
        return (pitch - s[0]) / s[1], (energy - s[2]) / s[3]

    def denormalize(self, pitch: torch.Tensor, energy: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        if not self.config.normalize_acoustics:
            return pitch, energy
        s = self.acoustic_stats
        return pitch * s[1] + s[0], energy * s[3] + s[2]

    # --- building blocks --------------------------------------------------------------------

    def word_features(self, word_vectors: torch.Tensor, dialogue_flags: torch.Tensor) -> torch.Tensor:
        """E_w = Encoder(words) + E_dia[flag]."""
        return word_vectors + self.dialogue_embedding(dialogue_flags)

    def length_regulate(self, word_feats: torch.Tensor, expand_index: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Gather word rows to phoneme positions: B x T x d -> B x N x d."""
        if not self.wiring.use_word:
            return word_feats.new_zeros(expand_index.shape + (word_feats.shape[-1],))
        index = expand_index.unsqueeze(-1).expand(-1, -1, word_feats.shape[-1])
        return torch.gather(word_feats, 1, index) * mask.unsqueeze(-1).to(word_feats.dtype)

    def fuse_phoneme_features(
        self,
        e_lr: torch.Tensor,
        phoneme_ids: torch.Tensor,
        tone_ids: torch.Tensor,
        speaker_ids: torch.Tensor,
        mask: torch.Tensor,
        style_ids: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        """E_pf = E_LR + E_phn + E_tone + E_spk (speaker row broadcast over positions)."""
        if int(speaker_ids.max()) >= self.num_speakers or int(speaker_ids.min()) < 0:
            bad = int(speaker_ids.max()) if int(speaker_ids.max()) >= self.num_speakers else int(speaker_ids.min())
            raise UnknownSpeakerError(bad, range(self.num_speakers))
        fused = e_lr + self.speaker_embedding(speaker_ids).unsqueeze(1)
        if self.wiring.use_phn:
            fused = fused + self.phoneme_embedding(phoneme_ids) + self.tone_embedding(tone_ids)
        if self.style_embedding is not None and style_ids is not None:
            fused = fused + self.style_embedding(style_ids).unsqueeze(1)
        return fused * mask.unsqueeze(-1).to(fused.dtype)

    def predict_pitch_energy(self, e_pf: torch.Tensor, lengths: torch.Tensor, mask: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        if self.pe_predictor is None:
            zeros = e_pf.new_zeros(e_pf.shape[:2])
            return zeros, zeros.clone()
        out = self.pe_predictor(e_pf, lengths) * mask.unsqueeze(-1).to(e_pf.dtype)
        return out[..., 0], out[..., 1]

    def predict_lpe(
        self, e_pf: torch.Tensor, pitch: torch.Tensor, energy: torch.Tensor, lengths: torch.Tensor, mask: torch.Tensor
    ) -> torch.Tensor:
        """LPE from concat(E_pf, pitch, energy); the same weights serve training and inference."""
        if self.wiring.use_pe:
            if pitch.shape != e_pf.shape[:2] or energy.shape != e_pf.shape[:2]:
                raise LengthMismatchError(
                    f"pitch {tuple(pitch.shape)} / energy {tuple(energy.shape)} do not match phonemes {tuple(e_pf.shape[:2])}"
                )
            inputs = torch.cat([e_pf, pitch.unsqueeze(-1), energy.unsqueeze(-1)], dim=-1)
        else:
            inputs = e_pf
        return self.lpe_predictor(inputs, lengths) * mask.unsqueeze(-1).to(e_pf.dtype)

    def classify_style(self, utterance_vectors: torch.Tensor) -> torch.Tensor:
        return self.style_classifier(utterance_vectors)

    # --- full pass --------------------------------------------------------------------------

    def forward(self, batch: UtteranceBatch, mode: Mode = "infer") -> UmpmOutput:
        if mode not in ("train", "infer"):
            raise ValidationFailure(f"mode must be 'train' or 'infer', got {mode!r}")
        if mode == "train" and not batch.has_targets:
            raise ValidationFailure("train mode needs pitch/energy targets")

        word_vectors, utterance_vectors = self.encoder(batch.token_ids, batch.token_lengths)
        e_w = self.word_features(word_vectors, batch.dialogue_flags)
        e_lr = self.length_regulate(e_w, batch.expand_index, batch.mask)
        style_logits = self.classify_style(utterance_vectors)

        style_ids = None
        if self.style_embedding is not None:
            style_ids = batch.style_labels if mode == "train" else style_logits.argmax(dim=-1)
        e_pf = self.fuse_phoneme_features(e_lr, batch.phoneme_ids, batch.tone_ids, batch.speaker_ids,
                                          batch.mask, style_ids)

        pitch_hat, energy_hat = self.predict_pitch_energy(e_pf, batch.lengths, batch.mask)
        if mode == "train":
            pitch_in, energy_in = self.normalize(batch.pitch, batch.energy)
            pitch_in = pitch_in * batch.mask.to(pitch_in.dtype)
            energy_in = energy_in * batch.mask.to(energy_in.dtype)
        else:
            pitch_in, energy_in = pitch_hat, energy_hat
        lpe_hat = self.predict_lpe(e_pf, pitch_in, energy_in, batch.lengths, batch.mask)

        return UmpmOutput(
            pitch_hat=pitch_hat,
            energy_hat=energy_hat,
            lpe_hat=lpe_hat,
            style_logits=style_logits,
            utterance_vectors=utterance_vectors,
            mask=batch.mask,
            lengths=batch.lengths,
        )

    def collate(self, utterances: Sequence[Utterance], targets=None, pad_to: Optional[int] = None,
                speaker_override: Optional[int] = None) -> UtteranceBatch:
        return collate_utterances(utterances, self.vocabulary, self.phoneme_index, self.num_speakers,
                                  targets=targets, dtype=self.dtype, pad_to=pad_to,
                                  speaker_override=speaker_override)

    def export(self, output: UmpmOutput, batch: UtteranceBatch, lpe: Optional[torch.Tensor] = None) -> List[PhonemeTargets]:
        """Per-utterance predictions in target units; LPE clamped to [0, 1]."""
        pitch, energy = self.denormalize(output.pitch_hat, output.energy_hat)
        lpe = output.lpe_hat if lpe is None else lpe
        lpe = lpe.clamp(0.0, 1.0)
        exported = []
        for b, utterance_id in enumerate(batch.utterance_ids):
            n = int(batch.lengths[b])
            exported.append(PhonemeTargets(
                utterance_id=utterance_id,
                pitch=tuple(float(v) for v in pitch[b, :n]),
                energy=tuple(float(v) for v in energy[b, :n]),
                lpe=tuple(tuple(float(v) for v in row) for row in lpe[b, :n]),
            ))
        return exported


def utterance_loss(
    output: UmpmOutput,
    batch: UtteranceBatch,
    lambdas: Sequence[float] = DEFAULT_LAMBDAS,
    mask: Optional[torch.Tensor] = None,
    model: Optional[UtteranceProsodyModel] = None,
) -> LossBreakdown:
    """
    lambda_pitch*MSE(pitch) + lambda_energy*MSE(energy) + lambda_lpe*MSE(lpe) + lambda_gse*CE(style).

    MSEs average over unmasked positions (and the 3 LPE components); the LPE
    term skips non-silent separators. When model is given its acoustic
    normalization applies to the pitch/energy targets.
    """
    if len(lambdas) != 4:
        raise ValidationFailure(f"expected 4 loss weights, got {len(lambdas)}")
    if not batch.has_targets or batch.lpe is None:
        raise ValidationFailure("loss needs a batch with targets")
    mask = batch.mask if mask is None else mask
    if not bool(mask.any()):
        raise ValidationFailure("every position in the batch is masked")

    pitch_target, energy_target = batch.pitch, batch.energy
    if model is not None:
        pitch_target, energy_target = model.normalize(pitch_target, energy_target)

    use_pe = model is None or model.wiring.use_pe
    if use_pe:
        pitch_mse = _masked_mse(output.pitch_hat, pitch_target, mask)
        energy_mse = _masked_mse(output.energy_hat, energy_target, mask)
    else:
        pitch_mse = output.lpe_hat.new_zeros(())
        energy_mse = output.lpe_hat.new_zeros(())
    lpe_mse = _masked_mse(output.lpe_hat, batch.lpe, mask & batch.lpe_mask)
    style_ce = F.cross_entropy(output.style_logits, batch.style_labels)

    components = (pitch_mse, energy_mse, lpe_mse, style_ce)
    total = lambdas[0] * pitch_mse + lambdas[1] * energy_mse + lambdas[2] * lpe_mse + lambdas[3] * style_ce
    return LossBreakdown(total=total, components=components, names=("pitch_mse", "energy_mse", "lpe_mse", "style_ce"))


# --- single-utterance operations --------------------------------------------------------------

def word_features(utt: Utterance, encoding: WordEncoding, params: UtteranceProsodyModel) -> torch.Tensor:
    """E_w for one utterance: (lexical words + punctuation) x d."""
    flags = torch.tensor([w.dialogue_flag for w in utt.encoder_words], dtype=torch.long)
    if flags.numel() != encoding.word_vectors.shape[0]:
        raise LengthMismatchError(f"{flags.numel()} encoder words but {encoding.word_vectors.shape[0]} vectors")
    return params.word_features(encoding.word_vectors, flags)


def length_regulate(word_feats: torch.Tensor, utt: Utterance) -> torch.Tensor:
    """Replicate word rows to phoneme rows (N x d); separators copy the preceding lexical word."""
    index = regulation_index(utt)
    if not index:
        raise ValidationFailure(f"utterance {utt.id} has N = 0")
    return word_feats[torch.tensor(index, dtype=torch.long)]


def fuse_phoneme_features(
    e_lr: torch.Tensor, symbols: Sequence[str], tones: Sequence[int], speaker_id: int, params: UtteranceProsodyModel
) -> torch.Tensor:
    if len(symbols) != e_lr.shape[0] or len(tones) != e_lr.shape[0]:
        raise LengthMismatchError("symbols/tones must match E_LR rows")
    unknown = [s for s in symbols if s not in params.phoneme_index]
    if unknown:
        raise ValidationFailure(f"unknown phoneme symbol(s) {sorted(set(unknown))}")
    phoneme_ids = torch.tensor([[params.phoneme_index[s] for s in symbols]], dtype=torch.long)
    tone_ids = torch.tensor([list(tones)], dtype=torch.long)
    mask = torch.ones(1, e_lr.shape[0], dtype=torch.bool)
    fused = params.fuse_phoneme_features(e_lr.unsqueeze(0), phoneme_ids, tone_ids,
                                         torch.tensor([speaker_id]), mask)
    return fused[0]


def predict_pitch_energy(e_pf: torch.Tensor, params: UtteranceProsodyModel) -> Tuple[torch.Tensor, torch.Tensor]:
    n = e_pf.shape[0]
    pitch, energy = params.predict_pitch_energy(e_pf.unsqueeze(0), torch.tensor([n]), torch.ones(1, n, dtype=torch.bool))
    return pitch[0], energy[0]


def predict_lpe(e_pf: torch.Tensor, pitch: torch.Tensor, energy: torch.Tensor, params: UtteranceProsodyModel) -> torch.Tensor:
    n = e_pf.shape[0]
    if pitch.shape[0] != n or energy.shape[0] != n:
        raise LengthMismatchError(f"pitch/energy length {pitch.shape[0]}/{energy.shape[0]} for N={n}")
    lpe = params.predict_lpe(e_pf.unsqueeze(0), pitch.unsqueeze(0), energy.unsqueeze(0),
                             torch.tensor([n]), torch.ones(1, n, dtype=torch.bool))
    return lpe[0]


def classify_style(utterance_vector: torch.Tensor, params: UtteranceProsodyModel) -> torch.Tensor:
    return params.classify_style(utterance_vector.unsqueeze(0))[0]


def forward(
    utt: Utterance, targets: Optional[PhonemeTargets], mode: Mode, params: UtteranceProsodyModel
) -> UmpmOutput:
    """Run the full stage-1 model on one utterance."""
    target_map = {utt.id: targets} if targets is not None else None
    return params(params.collate([utt], target_map), mode)
