"""
Word-level text encoder

Produces one vector per encoder token (lexical words and punctuation; "/"
separators are not encoder tokens) plus an utterance-level vector playing the
role of a "[CLS]" embedding.

The default is a small trainable encoder (embedding table + optional
bidirectional LSTM). A pretrained model can be plugged in through
load_pretrained_adapter(); the rest of the pipeline never depends on it.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import structlog
import torch
from pydantic import BaseModel, PositiveInt, field_validator, model_validator
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .config import RECURRENT_CONTEXT, AdapterSpec, ContextMode, normalize_context
from .corpus import Discourse, Utterance, iter_utterances
from .errors import CapabilityError, LengthMismatchError, ValidationFailure

logger = structlog.get_logger(__name__)

UNK_TOKEN = "<unk>"
UNK_ID = 0


class Vocabulary:
    """Surface -> id mapping; id 0 is reserved for unknown surfaces."""

    def __init__(self, tokens: Sequence[str]):
        if not tokens or tokens[0] != UNK_TOKEN:
            tokens = [UNK_TOKEN] + [t for t in tokens if t != UNK_TOKEN]
        if len(set(tokens)) != len(tokens):
            raise ValidationFailure("vocabulary contains duplicate tokens")
        self.tokens: List[str] = list(tokens)
        self._ids: Dict[str, int] = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def id(self, surface: str) -> int:
        return self._ids.get(surface, UNK_ID)

    def ids(self, utt: Utterance) -> List[int]:
        return [self.id(w.surface) for w in utt.encoder_words]

    def as_mapping(self) -> Dict[str, int]:
        return dict(self._ids)

    @classmethod
    def from_discourses(cls, discourses: Iterable[Discourse]) -> "Vocabulary":
        surfaces = {w.surface for utt in iter_utterances(discourses) for w in utt.encoder_words}
        return cls([UNK_TOKEN] + sorted(surfaces))

    @classmethod
    def load(cls, path: Path) -> "Vocabulary":
        """One token per line; the id is the 0-based line number."""
        with open(path, encoding="utf-8") as handle:
            return cls([line.rstrip("\n") for line in handle])

    def save(self, path: Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as handle:
            for token in self.tokens:
                handle.write(token + "\n")

    def unk_rate(self, utterances: Iterable[Utterance]) -> float:
        total = unknown = 0
        for utt in utterances:
            ids = self.ids(utt)
            total += len(ids)
            unknown += sum(1 for i in ids if i == UNK_ID)
        return unknown / total if total else 0.0


class EncoderConfig(BaseModel):
    vocabulary: Dict[str, int]
    d: PositiveInt = 32
    r: PositiveInt = 32
    context: ContextMode = RECURRENT_CONTEXT

    @field_validator("context", mode="before")
    @classmethod
    def _recurrent_shorthand(cls, value):
        return normalize_context(value)

    @model_validator(mode="after")
    def _widths(self) -> "EncoderConfig":
        if self.context == RECURRENT_CONTEXT and self.d % 2:
            raise ValueError(f"recurrent context needs an even d, got {self.d}")
        return self


@dataclass
class WordEncoding:
    word_vectors: torch.Tensor      # n x d, one row per encoder token
    utterance_vector: torch.Tensor  # r


def sequence_mask(lengths: torch.Tensor, max_len: int) -> torch.Tensor:
    return torch.arange(max_len, device=lengths.device)[None, :] < lengths[:, None]


class ToyWordEncoder(nn.Module):
    """Embedding table with a bag-of-words or bidirectional-LSTM context."""

    is_pretrained = False

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.d = config.d
        self.r = config.r
        self.embedding = nn.Embedding(len(config.vocabulary), config.d)
        self.rnn: Optional[nn.LSTM] = None
        if config.context == RECURRENT_CONTEXT:
            self.rnn = nn.LSTM(config.d, config.d // 2, batch_first=True, bidirectional=True)
        self.summary = nn.Linear(config.d, config.r)

    def forward(self, token_ids: torch.Tensor, lengths: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """token_ids B x T (padded), lengths B -> (B x T x d word vectors, B x r utterance vectors)."""
        max_len = token_ids.shape[1]
        mask = sequence_mask(lengths, max_len).unsqueeze(-1).to(self.embedding.weight.dtype)
        embedded = self.embedding(token_ids)

        if self.rnn is None:
            contextual = embedded * mask
            pooled = contextual.sum(dim=1) / lengths.unsqueeze(-1).to(contextual.dtype)
            return contextual, self.summary(pooled)

        packed = pack_padded_sequence(embedded, lengths.cpu(), batch_first=True, enforce_sorted=False)
        output, (h_n, _) = self.rnn(packed)
        contextual, _ = pad_packed_sequence(output, batch_first=True, total_length=max_len)
        # final forward state and final backward state, like a "[CLS]" summary
        final = torch.cat([h_n[-2], h_n[-1]], dim=-1)
        return contextual * mask, self.summary(final)


class PretrainedWordEncoder(nn.Module):
    """
    Adapter around a Hugging Face encoder.

    Words are fed pre-split; each word takes its first sub-token vector and the
    first position ("[CLS]") gives the utterance vector. Both are projected to
    the configured widths so the adapter honours the toy encoder's contract.
    """

    is_pretrained = True

    def __init__(self, spec: AdapterSpec, config: EncoderConfig):
        super().__init__()
        try:
            import transformers  # noqa: F401
            from transformers import AutoModel, AutoTokenizer
        except ImportError as exc:
            raise CapabilityError(
                f"encoder provider '{spec.provider}' needs the 'transformers' package, which is not installed"
            ) from exc
        try:
            self.tokenizer = AutoTokenizer.from_pretrained(spec.model_id)
            self.backbone = AutoModel.from_pretrained(spec.model_id)
        except Exception as exc:  # network, missing files, bad identifiers
            raise CapabilityError(f"could not load pretrained encoder '{spec.model_id}': {exc}") from exc

        self.spec = spec
        self.d = config.d
        self.r = config.r
        self.id_to_surface = {i: s for s, i in config.vocabulary.items()}
        hidden = self.backbone.config.hidden_size
        self.word_projection = nn.Linear(hidden, config.d)
        self.utterance_projection = nn.Linear(hidden, config.r)
        for parameter in self.backbone.parameters():
            parameter.requires_grad = spec.trainable

    def forward(self, token_ids: torch.Tensor, lengths: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        batch_words = [
            [self.id_to_surface.get(int(t), "") for t in row[: int(n)]]
            for row, n in zip(token_ids, lengths)
        ]
        encoded = self.tokenizer(batch_words, is_split_into_words=True, return_tensors="pt", padding=True)
        hidden = self.backbone(**encoded).last_hidden_state.to(self.word_projection.weight.dtype)

        max_len = token_ids.shape[1]
        gathered = hidden.new_zeros(len(batch_words), max_len, hidden.shape[-1])
        for b in range(len(batch_words)):
            seen = set()
            for position, word_index in enumerate(encoded.word_ids(b)):
                if word_index is not None and word_index not in seen:
                    gathered[b, word_index] = hidden[b, position]
                    seen.add(word_index)
        mask = sequence_mask(lengths, max_len).unsqueeze(-1).to(hidden.dtype)
        return self.word_projection(gathered) * mask, self.utterance_projection(hidden[:, 0])


def load_pretrained_adapter(spec: Optional[AdapterSpec], config: EncoderConfig) -> nn.Module:
    """
    Build the word encoder.

    No spec means the toy encoder. Any failure to provide the requested
    pretrained encoder raises CapabilityError; the caller decides whether to
    fall back.
    """
    if spec is None:
        return ToyWordEncoder(config)
    if spec.provider != "transformers":
        raise CapabilityError(f"unknown encoder provider '{spec.provider}'; supported: 'transformers'")
    logger.info("loading pretrained encoder", provider=spec.provider, model_id=spec.model_id,
                trainable=spec.trainable)
    return PretrainedWordEncoder(spec, config)


def check_encoding_shape(word_vectors: torch.Tensor, n: int, d: int) -> None:
    if tuple(word_vectors.shape) != (n, d):
        raise LengthMismatchError(f"encoder returned shape {tuple(word_vectors.shape)}, expected {(n, d)}")


def encode(utt: Utterance, encoder: nn.Module, vocabulary: Vocabulary) -> WordEncoding:
    """Encode one utterance; word_vectors has one row per lexical word or punctuation mark."""
    ids = vocabulary.ids(utt)
    if not ids:
        raise ValidationFailure(f"utterance {utt.id!r} has no encoder tokens")
    dtype_device = next(encoder.parameters())
    token_ids = torch.tensor([ids], dtype=torch.long, device=dtype_device.device)
    lengths = torch.tensor([len(ids)], dtype=torch.long)
    word_vectors, utterance_vectors = encoder(token_ids, lengths)
    check_encoding_shape(word_vectors[0], len(ids), encoder.d)
    return WordEncoding(word_vectors=word_vectors[0], utterance_vector=utterance_vectors[0])
