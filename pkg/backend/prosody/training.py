"""
Two-stage training harness

Stage 1 trains the utterance model on shuffled utterance mini-batches with
two Adam parameter groups (encoder / everything else). Stage 2 freezes the
stage-1 model and trains the discourse tensors on shuffled discourse
mini-batches. Both stages:
1. Derive every random choice from one seed
2. Record the loss components per epoch (CSV loss history)
3. Abort with TrainingDivergedError on the first non-finite value
4. Write PROSO-CKPT v1 checkpoints
"""

import random
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Collection, Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
import structlog
import torch

from .checkpoint import Checkpoint, corpus_signature, save_checkpoint
from .config import ABLATION_FLAGS, ProsodyConfig, TrainConfig
from .corpus import Discourse, Utterance, iter_utterances, parse_manifest, phoneme_inventory
from .encoder import Vocabulary
from .errors import ConfigMismatchError, FrozenParameterError, TrainingDivergedError, ValidationFailure
from .features import PhonemeTargets, infer_silences, read_feature_file
from .model_d import DiscourseProsodyModel, tensor_digest, train_stage2_step
from .model_u import LossBreakdown, ModelWiring, UtteranceProsodyModel, utterance_loss

logger = structlog.get_logger(__name__)

MANIFEST_NAME = "manifest.jsonl"
FEATURES_DIR = "features"
HISTORY_COLUMNS = ["epoch", "pitch_mse", "energy_mse", "lpe_mse", "style_ce", "total"]


# --- corpus on disk ---------------------------------------------------------------------------

class ProsodyCorpus:
    """
    A manifest plus per-utterance feature files.

    Directory layout: manifest.jsonl and features/<utterance_id>.feat.
    Separator silence flags come from the manifest and the feature files.
    """

    def __init__(self, discourses: Sequence[Discourse], targets: Dict[str, PhonemeTargets],
                 root: Optional[Path] = None):
        self.root = root
        self.targets = dict(targets)
        self.discourses = [self._mark(d) for d in discourses]

    def _mark(self, discourse: Discourse) -> Discourse:
        if not self.targets:
            return discourse
        utterances = []
        for utt in discourse.utterances:
            if utt.id not in self.targets:
                raise ValidationFailure(f"no feature file for utterance {utt.id}")
            target = self.targets[utt.id]
            if target.num_phonemes != utt.num_phonemes:
                raise ValidationFailure(
                    f"utterance {utt.id}: manifest gives N={utt.num_phonemes}, feature file has {target.num_phonemes}"
                )
            utterances.append(infer_silences(utt, target))
        return discourse.model_copy(update={"utterances": tuple(utterances)})

    @classmethod
    def load(cls, root: Path, require_targets: bool = True, speakers: Optional[Collection[int]] = None,
             styles: Optional[Collection[int]] = None) -> "ProsodyCorpus":
        """Read a corpus directory; speakers/styles restrict the manifest ids that are accepted."""
        root = Path(root)
        manifest = root / MANIFEST_NAME
        if not manifest.is_file():
            raise ValidationFailure(f"{root} has no {MANIFEST_NAME}")
        with open(manifest, encoding="utf-8") as handle:
            discourses = parse_manifest(handle, speakers=speakers, styles=styles)
        targets: Dict[str, PhonemeTargets] = {}
        features = root / FEATURES_DIR
        if require_targets or features.is_dir():
            for utt in iter_utterances(discourses):
                path = features / f"{utt.id}.feat"
                if not path.is_file():
                    if require_targets:
                        raise ValidationFailure(f"missing feature file {path}")
                    continue
                with open(path, encoding="utf-8") as handle:
                    targets[utt.id] = read_feature_file(handle)
        if not require_targets and len(targets) != sum(d.num_utterances for d in discourses):
            targets = {}
        logger.info("corpus loaded", root=str(root), discourses=len(discourses), with_targets=bool(targets))
        return cls(discourses, targets, root)

    @property
    def utterances(self) -> List[Utterance]:
        return list(iter_utterances(self.discourses))

    @property
    def num_speakers(self) -> int:
        return max(u.speaker_id for u in self.utterances) + 1

    @property
    def num_styles(self) -> int:
        labels = [u.style_label for u in self.utterances] + [d.style_label for d in self.discourses]
        return max(2, max(labels) + 1)

    @property
    def phonemes(self) -> List[str]:
        return phoneme_inventory(self.discourses)

    def subset(self, discourses: Iterable[Discourse]) -> "ProsodyCorpus":
        chosen = list(discourses)
        ids = {u.id for u in iter_utterances(chosen)}
        return ProsodyCorpus(chosen, {k: v for k, v in self.targets.items() if k in ids}, self.root)


# --- ablations and determinism ------------------------------------------------------------------

def apply_ablation(flags: Iterable[str]) -> ModelWiring:
    """
    Model wiring for a set of ablation flags.

    no_word zeroes the length-regulated word features, no_phn zeroes the
    phoneme and tone embeddings, no_pe drops the pitch/energy path so the LPE
    predictor sees the fused features alone.
    """
    flags = set(flags)
    unknown = sorted(flags - set(ABLATION_FLAGS))
    if unknown:
        raise ValidationFailure(f"unknown ablation flag(s) {unknown}; expected a subset of {list(ABLATION_FLAGS)}")
    return ModelWiring(use_word="no_word" not in flags, use_phn="no_phn" not in flags, use_pe="no_pe" not in flags)


def set_determinism(seed: int) -> torch.Generator:
    """Seed python, numpy and torch; returns the generator used for shuffling."""
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)
    return torch.Generator().manual_seed(seed)


def parameter_digest(model: torch.nn.Module) -> str:
    return tensor_digest(model.state_dict().items())


def _check_finite(loss: LossBreakdown, model: torch.nn.Module, step: int) -> None:
    for name, value in zip(loss.names, loss.components):
        if not torch.isfinite(value).all():
            raise TrainingDivergedError(name, step)
    if not torch.isfinite(loss.total).all():
        raise TrainingDivergedError("total", step)
    for name, parameter in model.named_parameters():
        if parameter.grad is not None and not torch.isfinite(parameter.grad).all():
            raise TrainingDivergedError(f"{name}.grad", step)


def _history_row(epoch: int, losses: List[Dict[str, float]]) -> Dict[str, float]:
    row: Dict[str, float] = {"epoch": epoch}
    for column in HISTORY_COLUMNS[1:]:
        row[column] = float(np.mean([l.get(column, 0.0) for l in losses])) if losses else 0.0
    return row


def write_history(history: pd.DataFrame, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    history.to_csv(path, index=False, columns=HISTORY_COLUMNS, lineterminator="\n")


@dataclass
class TrainingResult:
    model: Union[UtteranceProsodyModel, DiscourseProsodyModel]
    history: pd.DataFrame
    steps: int
    checkpoint: Optional[Checkpoint] = None
    elapsed: float = 0.0
    digests: Dict[str, str] = field(default_factory=dict)


# --- stage 1 ------------------------------------------------------------------------------------

def build_stage1_model(corpus: ProsodyCorpus, config: ProsodyConfig) -> UtteranceProsodyModel:
    model = UtteranceProsodyModel(
        config.model,
        Vocabulary.from_discourses(corpus.discourses),
        corpus.phonemes,
        corpus.num_speakers,
        corpus.num_styles,
        wiring=apply_ablation(config.ablation.flags),
    )
    if config.model.normalize_acoustics and corpus.targets:
        pitch = np.concatenate([np.asarray(t.pitch) for t in corpus.targets.values()])
        energy = np.concatenate([np.asarray(t.energy) for t in corpus.targets.values()])
        model.set_acoustic_stats(float(pitch.mean()), float(pitch.std()), float(energy.mean()), float(energy.std()))
    return model


def stage1_optimizer(model: UtteranceProsodyModel, train_config: TrainConfig) -> torch.optim.Adam:
    """Adam with the encoder at lr_encoder (or the adapter override) and everything else at lr_rest."""
    encoder_params = [p for p in model.encoder.parameters() if p.requires_grad]
    encoder_ids = {id(p) for p in model.encoder.parameters()}
    rest = [p for p in model.parameters() if id(p) not in encoder_ids and p.requires_grad]
    lr_encoder = train_config.lr_encoder
    adapter = model.config.adapter
    if adapter is not None and adapter.lr_override is not None:
        lr_encoder = adapter.lr_override
    groups = [{"params": rest, "lr": train_config.lr_rest, "name": "rest"}]
    if encoder_params:
        groups.insert(0, {"params": encoder_params, "lr": lr_encoder, "name": "encoder"})
    return torch.optim.Adam(groups, betas=train_config.betas, eps=train_config.eps)


def stage2_optimizer(model: DiscourseProsodyModel, train_config: TrainConfig) -> torch.optim.Adam:
    """Adam over the stage-2 tensors only, at lr_stage2."""
    return torch.optim.Adam([{"params": model.stage2_parameters(), "lr": train_config.lr_stage2, "name": "stage2"}],
                            betas=train_config.betas, eps=train_config.eps)

def train_stage1(
    corpus: ProsodyCorpus,
    config: ProsodyConfig,
    out: Optional[Path] = None,
    history_path: Optional[Path] = None,
) -> TrainingResult:
    """
    Train the utterance model.

    Raises:
        ValidationFailure: corpus without feature files
        TrainingDivergedError: first non-finite loss component or gradient
    """
    train_config = config.train_config(1)
    if not corpus.targets:
        raise ValidationFailure("stage-1 training needs feature files for every utterance")
    utterances = corpus.utterances
    started = time.time()

    generator = set_determinism(train_config.seed)
    model = build_stage1_model(corpus, config)
    optimizer = stage1_optimizer(model, train_config)
    logger.info("stage 1 training started", utterances=len(utterances), epochs=train_config.epochs,
                batch_size=train_config.batch_size, ablation=train_config.ablation)

    rows = []
    steps = 0
    for epoch in range(train_config.epochs):
        model.train()
        order = torch.randperm(len(utterances), generator=generator).tolist()
        losses = []
        for start in range(0, len(order), train_config.batch_size):
            chosen = [utterances[i] for i in order[start:start + train_config.batch_size]]
            batch = model.collate(chosen, corpus.targets)
            optimizer.zero_grad()
            loss = utterance_loss(model(batch, "train"), batch, train_config.lambdas, model=model)
            loss.total.backward()
            _check_finite(loss, model, steps)
            if train_config.clip_grad_norm is not None:
                torch.nn.utils.clip_grad_norm_(model.parameters(), train_config.clip_grad_norm)
            optimizer.step()
            steps += 1
            losses.append(loss.as_floats())
        row = _history_row(epoch, losses)
        rows.append(row)
        logger.info("stage 1 epoch", **row)

    model.eval()
    history = pd.DataFrame(rows, columns=HISTORY_COLUMNS)
    result = TrainingResult(model=model, history=history, steps=steps, elapsed=time.time() - started)
    if history_path is not None:
        write_history(history, history_path)
    if out is not None:
        result.checkpoint = save_checkpoint(out, model, config)
    logger.info("stage 1 training finished", steps=steps, elapsed=round(result.elapsed, 2))
    return result


# --- stage 2 ------------------------------------------------------------------------------------

def check_stage2_inputs(corpus: ProsodyCorpus, stage1: Checkpoint, config: ProsodyConfig) -> None:
    """
    Raises:
        ConfigMismatchError: checkpoint is not stage 1, or the model config or
            corpus shape differs from what the checkpoint was trained with
    """
    if stage1.stage != 1:
        raise ConfigMismatchError(f"stage 2 needs a stage-1 checkpoint, got stage {stage1.stage}")
    if config.config_hash() != stage1.config_hash:
        raise ConfigMismatchError(
            f"config hash {config.config_hash()[:12]} differs from the checkpoint's {stage1.config_hash[:12]}"
        )
    signature = corpus_signature(corpus.phonemes, corpus.num_speakers, corpus.num_styles)
    if signature != stage1.corpus_signature:
        raise ConfigMismatchError("corpus phoneme inventory, speakers or styles differ from the stage-1 checkpoint")


def train_stage2(
    corpus: ProsodyCorpus,
    stage1: Checkpoint,
    config: ProsodyConfig,
    out: Optional[Path] = None,
    history_path: Optional[Path] = None,
) -> TrainingResult:
    """
    Train the discourse model on top of a frozen stage-1 checkpoint.

    The history's pitch and energy columns are 0.0: stage 2 leaves those
    predictions to stage 1.

    Raises:
        ConfigMismatchError: see check_stage2_inputs
        FrozenParameterError: any stage-1 tensor changed during training
    """
    check_stage2_inputs(corpus, stage1, config)
    train_config = config.train_config(2)
    if not corpus.targets:
        raise ValidationFailure("stage-2 training needs feature files for every utterance")
    discourses = corpus.discourses
    started = time.time()

    generator = set_determinism(train_config.seed)
    model = DiscourseProsodyModel(stage1.build_stage1(), config.model)
    model.use_cache = train_config.cache_stage1
    before = model.stage1_digest()
    optimizer = stage2_optimizer(model, train_config)
    logger.info("stage 2 training started", discourses=len(discourses), epochs=train_config.epochs,
                batch_size=train_config.batch_size, cache_stage1=train_config.cache_stage1)

    rows = []
    steps = 0
    for epoch in range(train_config.epochs):
        order = torch.randperm(len(discourses), generator=generator).tolist()
        losses = []
        for start in range(0, len(order), train_config.batch_size):
            chosen = [discourses[i] for i in order[start:start + train_config.batch_size]]
            batches = [model.prepare_discourse(d, corpus.targets) for d in chosen]
            loss = train_stage2_step(batches, model, optimizer, train_config.lambdas, train_config.clip_grad_norm)
            _check_finite(loss, model, steps)
            steps += 1
            losses.append(loss.as_floats())
        row = _history_row(epoch, losses)
        rows.append(row)
        logger.info("stage 2 epoch", **row)

    after = model.stage1_digest()
    if after != before:
        raise FrozenParameterError("stage-1 tensors changed during stage-2 training")

    model.eval()
    history = pd.DataFrame(rows, columns=HISTORY_COLUMNS)
    result = TrainingResult(model=model, history=history, steps=steps, elapsed=time.time() - started,
                            digests={"stage1_before": before, "stage1_after": after})
    if history_path is not None:
        write_history(history, history_path)
    if out is not None:
        result.checkpoint = save_checkpoint(out, model, config)
    logger.info("stage 2 training finished", steps=steps, elapsed=round(result.elapsed, 2))
    return result
