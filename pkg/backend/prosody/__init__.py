"""
Prosody Package

Discourse-level multi-scale prosody prediction for expressive Mandarin
text-to-speech front ends. Predicts per-phoneme pitch, energy and a 3-dim
local prosody embedding (LPE) from text, pinyin and a speaker id, in two
stages: an utterance-level model and a discourse-level model on top of it.
"""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ProsodyConfig, load_config
from .corpus import Discourse, Utterance, assign_dialogue_flags, parse_manifest, tokenize_and_separate
from .evaluation import EvalReport, evaluate, predict
from .features import PhonemeTargets, build_targets
from .model_d import DiscourseProsodyModel, adjust_lpe
from .model_u import UtteranceProsodyModel, utterance_loss
from .synthgen import GeneratorSpec, generate, mean_baseline_mse
from .training import ProsodyCorpus, apply_ablation, set_determinism, train_stage1, train_stage2

__all__ = [
    "Checkpoint",
    "DiscourseProsodyModel",
    "Discourse",
    "EvalReport",
    "GeneratorSpec",
    "PhonemeTargets",
    "ProsodyConfig",
    "ProsodyCorpus",
    "Utterance",
    "UtteranceProsodyModel",
    "adjust_lpe",
    "apply_ablation",
    "assign_dialogue_flags",
    "build_targets",
    "evaluate",
    "generate",
    "load_checkpoint",
    "load_config",
    "mean_baseline_mse",
    "parse_manifest",
    "predict",
    "save_checkpoint",
    "set_determinism",
    "tokenize_and_separate",
    "train_stage1",
    "train_stage2",
    "utterance_loss",
]

# Module Role Definitions
MODULE_ROLES = {
    "corpus": "Text model, separators, dialogue flags, tones, manifest I/O and splits",
    "features": "Frame tracks and alignments to per-phoneme pitch/energy/LPE targets",
    "encoder": "Word-level text encoder (toy default, optional pretrained adapter)",
    "model_u": "Stage-1 utterance model: length regulator, predictors, style classifier",
    "model_d": "Stage-2 discourse model: context encoder, LPE adjustment, attention pooling",
    "training": "Two-stage optimization, ablations, determinism, loss histories",
    "synthgen": "Synthetic corpora with closed-form LPE laws",
    "evaluation": "Inference outputs, metrics, contour exports and comparisons",
    "checkpoint": "PROSO-CKPT v1 container",
}
