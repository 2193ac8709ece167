"""
Checkpoint container (PROSO-CKPT v1)

A single torch.save() dictionary holding everything needed to rebuild a model
without the training corpus: config, vocabulary, phoneme inventory, speaker
and style counts, ablation wiring, acoustic normalization (as a buffer) and
the tensors. Stage-2 checkpoints also carry the frozen stage-1 tensors.
"""

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import structlog
import torch

from .config import ProsodyConfig
from .encoder import Vocabulary
from .errors import ConfigMismatchError, ValidationFailure
from .model_d import DiscourseProsodyModel
from .model_u import ModelWiring, UtteranceProsodyModel

logger = structlog.get_logger(__name__)

CHECKPOINT_MAGIC = "PROSO-CKPT"
CHECKPOINT_VERSION = 1

ProsodyModel = Union[UtteranceProsodyModel, DiscourseProsodyModel]


def corpus_signature(phonemes: Sequence[str], num_speakers: int, num_styles: int) -> str:
    """Digest of the corpus properties that fix the stage-1 tensor shapes."""
    payload = {"phonemes": list(phonemes), "num_speakers": num_speakers, "num_styles": num_styles}
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _cpu_state(state: Dict[str, torch.Tensor]) -> Dict[str, torch.Tensor]:
    return {name: tensor.detach().cpu().clone() for name, tensor in state.items()}


@dataclass
class Checkpoint:
    stage: int
    config: ProsodyConfig
    config_hash: str
    corpus_signature: str
    vocabulary: Vocabulary
    phonemes: List[str]
    num_speakers: int
    num_styles: int
    wiring: ModelWiring
    stage1_state: Dict[str, torch.Tensor]
    stage2_state: Optional[Dict[str, torch.Tensor]] = None

    def build_stage1(self) -> UtteranceProsodyModel:
        model = UtteranceProsodyModel(
            self.config.model,
            self.vocabulary,
            self.phonemes,
            self.num_speakers,
            self.num_styles,
            wiring=self.wiring,
        )
        model.load_state_dict(self.stage1_state, strict=True)
        return model

    def build_model(self) -> ProsodyModel:
        """Stage-1 model for stage-1 checkpoints, stage-1 + stage-2 model otherwise."""
        stage1 = self.build_stage1()
        if self.stage == 1:
            return stage1
        model = DiscourseProsodyModel(stage1, self.config.model)
        missing, unexpected = model.load_state_dict(self.stage2_state, strict=False)
        missing = [name for name in missing if not name.startswith("stage1.")]
        if missing or unexpected:
            raise ValidationFailure(f"stage-2 tensors do not match the model: missing={missing}, unexpected={unexpected}")
        return model


def save_checkpoint(path: Path, model: ProsodyModel, config: ProsodyConfig) -> Checkpoint:
    """
    Write a PROSO-CKPT v1 file for either stage and return the in-memory view.

    Raises:
        ConfigMismatchError: the model was built with a different layout than config.model
    """
    if isinstance(model, DiscourseProsodyModel):
        stage, stage1 = 2, model.stage1
        stage2_state = _cpu_state({n: t for n, t in model.state_dict().items() if not n.startswith("stage1.")})
    else:
        stage, stage1, stage2_state = 1, model, None
    layout = {"adapter"}
    if stage1.config.model_dump(exclude=layout) != config.model.model_dump(exclude=layout):
        raise ConfigMismatchError("model layout differs from the config it is being saved with")

    checkpoint = Checkpoint(
        stage=stage,
        config=config,
        config_hash=config.config_hash(),
        corpus_signature=corpus_signature(stage1.phonemes, stage1.num_speakers, stage1.num_styles),
        vocabulary=stage1.vocabulary,
        phonemes=list(stage1.phonemes),
        num_speakers=stage1.num_speakers,
        num_styles=stage1.num_styles,
        wiring=stage1.wiring,
        stage1_state=_cpu_state(stage1.state_dict()),
        stage2_state=stage2_state,
    )
    payload = {
        "format": CHECKPOINT_MAGIC,
        "version": CHECKPOINT_VERSION,
        "stage": checkpoint.stage,
        "config": config.model_dump_json(),
        "config_hash": checkpoint.config_hash,
        "corpus_signature": checkpoint.corpus_signature,
        "vocabulary": list(checkpoint.vocabulary.tokens),
        "phonemes": checkpoint.phonemes,
        "num_speakers": checkpoint.num_speakers,
        "num_styles": checkpoint.num_styles,
        "wiring": checkpoint.wiring.model_dump(),
        "stage1": checkpoint.stage1_state,
        "stage2": stage2_state,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)
    logger.info("checkpoint saved", path=str(path), stage=stage, config_hash=checkpoint.config_hash[:12])
    return checkpoint


def load_checkpoint(path: Path) -> Checkpoint:
    """
    Read a PROSO-CKPT v1 file.

    Raises:
        ValidationFailure: not a checkpoint, wrong version or malformed content
    """
    path = Path(path)
    if not path.is_file():
        raise ValidationFailure(f"checkpoint {path} does not exist")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise ValidationFailure(f"could not read checkpoint {path}: {exc}") from exc

    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_MAGIC:
        raise ValidationFailure(f"{path} is not a {CHECKPOINT_MAGIC} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValidationFailure(f"unsupported checkpoint version {payload.get('version')!r}, expected {CHECKPOINT_VERSION}")
    stage = payload.get("stage")
    if stage not in (1, 2):
        raise ValidationFailure(f"checkpoint stage tag must be 1 or 2, got {stage!r}")
    if stage == 2 and payload.get("stage2") is None:
        raise ValidationFailure("stage-2 checkpoint has no stage-2 tensors")

    config = ProsodyConfig.model_validate_json(payload["config"])
    if config.config_hash() != payload["config_hash"]:
        raise ValidationFailure("checkpoint config does not match its stored config hash")

    return Checkpoint(
        stage=stage,
        config=config,
        config_hash=payload["config_hash"],
        corpus_signature=payload["corpus_signature"],
        vocabulary=Vocabulary(payload["vocabulary"]),
        phonemes=list(payload["phonemes"]),
        num_speakers=int(payload["num_speakers"]),
        num_styles=int(payload["num_styles"]),
        wiring=ModelWiring(**payload["wiring"]),
        stage1_state=payload["stage1"],
        stage2_state=payload["stage2"],
    )
