"""
Padded utterance batches

Collates utterances (and optional targets) into padded tensors with explicit
masks. Padding positions carry index 0 / value 0 and mask False.
"""

from dataclasses import dataclass, fields, replace
from typing import Dict, List, Mapping, Optional, Sequence

import torch

from .corpus import Utterance, WordKind
from .encoder import Vocabulary
from .errors import AlignmentError, LengthMismatchError, UnknownSpeakerError, ValidationFailure
from .features import PhonemeTargets


@dataclass
class UtteranceBatch:
    utterance_ids: List[str]
    token_ids: torch.Tensor        # B x T   encoder tokens (lexical words + punctuation)
    token_lengths: torch.Tensor    # B
    dialogue_flags: torch.Tensor   # B x T
    expand_index: torch.Tensor     # B x N   encoder-token row feeding each phoneme
    phoneme_ids: torch.Tensor      # B x N
    tone_ids: torch.Tensor         # B x N
    speaker_ids: torch.Tensor      # B
    style_labels: torch.Tensor     # B
    lengths: torch.Tensor          # B       phoneme counts N_i
    mask: torch.Tensor             # B x N   valid phoneme positions
    lpe_mask: torch.Tensor         # B x N   positions scored by the LPE loss
    pitch: Optional[torch.Tensor] = None   # B x N
    energy: Optional[torch.Tensor] = None  # B x N
    lpe: Optional[torch.Tensor] = None     # B x N x 3

    @property
    def size(self) -> int:
        return len(self.utterance_ids)

    @property
    def has_targets(self) -> bool:
        return self.pitch is not None

    def with_acoustics(self, pitch: torch.Tensor, energy: torch.Tensor) -> "UtteranceBatch":
        return replace(self, pitch=pitch, energy=energy)

    def to(self, dtype: torch.dtype) -> "UtteranceBatch":
        updates = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, torch.Tensor) and value.is_floating_point():
                updates[f.name] = value.to(dtype)
        return replace(self, **updates)


def regulation_index(utt: Utterance) -> List[int]:
    """
    Encoder-token row used by each phoneme.

    Lexical word i repeats its row p_i times, a separator reuses the row of the
    preceding lexical word, and punctuation contributes no phoneme rows.
    """
    index: List[int] = []
    token = -1
    last_lexical = -1
    for word in utt.words:
        if word.kind is WordKind.SEPARATOR:
            if last_lexical < 0:
                raise AlignmentError(f"utterance {utt.id}: separator without a preceding lexical word")
            index.append(last_lexical)
            continue
        token += 1
        if word.kind is WordKind.LEXICAL:
            last_lexical = token
            index.extend([token] * word.phoneme_length)
    return index


def _pad(rows: Sequence[Sequence], width: int, fill, dtype: torch.dtype) -> torch.Tensor:
    return torch.tensor([list(r) + [fill] * (width - len(r)) for r in rows], dtype=dtype)


def collate_utterances(
    utterances: Sequence[Utterance],
    vocabulary: Vocabulary,
    phoneme_index: Mapping[str, int],
    num_speakers: int,
    targets: Optional[Mapping[str, PhonemeTargets]] = None,
    dtype: torch.dtype = torch.float32,
    pad_to: Optional[int] = None,
    speaker_override: Optional[int] = None,
) -> UtteranceBatch:
    """
    Build a padded batch.

    pad_to widens the phoneme axis beyond the batch maximum (extra columns are
    masked). speaker_override replaces every utterance's speaker id.

    Raises:
        ValidationFailure: empty utterance or unknown phoneme symbol
        UnknownSpeakerError: speaker id not below num_speakers
    """
    if not utterances:
        raise ValidationFailure("cannot collate an empty batch")

    token_rows, flag_rows, expand_rows, phoneme_rows, tone_rows, lpe_mask_rows = [], [], [], [], [], []
    speakers, styles, lengths = [], [], []
    for utt in utterances:
        n = utt.num_phonemes
        if n == 0:
            raise ValidationFailure(f"utterance {utt.id} has no phonemes")
        encoder_words = utt.encoder_words
        token_rows.append([vocabulary.id(w.surface) for w in encoder_words])
        flag_rows.append([w.dialogue_flag for w in encoder_words])
        expand_rows.append(regulation_index(utt))

        ids, tones, scored = [], [], []
        for phoneme in utt.phonemes:
            if phoneme.symbol not in phoneme_index:
                raise ValidationFailure(f"utterance {utt.id}: unknown phoneme symbol '{phoneme.symbol}'")
            ids.append(phoneme_index[phoneme.symbol])
            tones.append(phoneme.tone_label)
            # non-silent separators have forced-zero LPE targets
            scored.append(not (phoneme.is_separator and not phoneme.is_silent))
        phoneme_rows.append(ids)
        tone_rows.append(tones)
        lpe_mask_rows.append(scored)

        speaker = utt.speaker_id if speaker_override is None else speaker_override
        if not 0 <= speaker < num_speakers:
            raise UnknownSpeakerError(speaker, range(num_speakers))
        speakers.append(speaker)
        styles.append(utt.style_label)
        lengths.append(n)

    max_tokens = max(len(r) for r in token_rows)
    max_n = max(lengths)
    if pad_to is not None:
        if pad_to < max_n:
            raise LengthMismatchError(f"pad_to={pad_to} is shorter than the longest utterance ({max_n})")
        max_n = pad_to

    lengths_t = torch.tensor(lengths, dtype=torch.long)
    mask = torch.arange(max_n)[None, :] < lengths_t[:, None]
    batch = UtteranceBatch(
        utterance_ids=[u.id for u in utterances],
        token_ids=_pad(token_rows, max_tokens, 0, torch.long),
        token_lengths=torch.tensor([len(r) for r in token_rows], dtype=torch.long),
        dialogue_flags=_pad(flag_rows, max_tokens, 0, torch.long),
        expand_index=_pad(expand_rows, max_n, 0, torch.long),
        phoneme_ids=_pad(phoneme_rows, max_n, 0, torch.long),
        tone_ids=_pad(tone_rows, max_n, 0, torch.long),
        speaker_ids=torch.tensor(speakers, dtype=torch.long),
        style_labels=torch.tensor(styles, dtype=torch.long),
        lengths=lengths_t,
        mask=mask,
        lpe_mask=_pad(lpe_mask_rows, max_n, False, torch.bool),
    )

    if targets is None:
        return batch

    pitch_rows, energy_rows, lpe_rows = [], [], []
    for utt in utterances:
        if utt.id not in targets:
            raise LengthMismatchError(f"no targets for utterance {utt.id}")
        t = targets[utt.id]
        if t.num_phonemes != utt.num_phonemes:
            raise LengthMismatchError(f"utterance {utt.id}: N={utt.num_phonemes} but targets have {t.num_phonemes}")
        pitch_rows.append(t.pitch)
        energy_rows.append(t.energy)
        lpe_rows.append([list(row) for row in t.lpe])

    batch.pitch = _pad(pitch_rows, max_n, 0.0, dtype)
    batch.energy = _pad(energy_rows, max_n, 0.0, dtype)
    batch.lpe = _pad(lpe_rows, max_n, [0.0, 0.0, 0.0], dtype)
    return batch


def phoneme_index_from(inventory: Sequence[str]) -> Dict[str, int]:
    return {symbol: i for i, symbol in enumerate(inventory)}
