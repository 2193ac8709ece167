"""
Inference outputs and evaluation

1. predict(): run a stage-1 or stage-2 model over discourses
2. Prediction directories: features/<utterance_id>.feat, styles.jsonl, manifest.jsonl
3. evaluate(): LPE / pitch / energy MSE and style accuracies (EvalReport)
4. Pitch-contour tables and summaries for model comparisons
5. Ablation comparison table over several prediction directories
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import structlog
import torch
from pydantic import BaseModel, Field

from .corpus import Discourse, Utterance, write_manifest
from .errors import ValidationFailure
from .features import PhonemeTargets, mark_silences, read_feature_file, write_feature_file
from .model_d import DiscourseProsodyModel
from .model_u import UtteranceProsodyModel
from .synthgen import STYLES_FILE, scored_lpe_rows, write_styles
from .training import FEATURES_DIR, MANIFEST_NAME, ProsodyCorpus

logger = structlog.get_logger(__name__)

REPORT_JSON = "eval_report.json"
REPORT_CSV = "eval_report.csv"
CONTOUR_COLUMNS = ["phoneme_index", "symbol", "pitch", "energy", "is_separator"]
COMPARE_COLUMNS = ["model", "lpe_mse", "pitch_mse", "energy_mse", "utterance_style_accuracy",
                   "discourse_style_accuracy"]


def argmax_first(values: Sequence[float]) -> int:
    """Index of the largest value; ties go to the lowest index."""
    return int(np.argmax(np.asarray(values, dtype=np.float64)))


@dataclass
class Predictions:
    features: Dict[str, PhonemeTargets] = field(default_factory=dict)
    utterance_styles: Dict[str, int] = field(default_factory=dict)
    discourse_styles: Dict[str, int] = field(default_factory=dict)


# --- inference ----------------------------------------------------------------------------------

def predict(
    model: Union[UtteranceProsodyModel, DiscourseProsodyModel],
    discourses: Sequence[Discourse],
    speaker: Optional[int] = None,
) -> Predictions:
    """
    Predict per-phoneme features and style labels from text alone.

    A stage-1 model predicts the discourse style from the mean of its
    utterance style probabilities; a stage-2 model uses its discourse
    classifier and adjusts the LPE with the discourse context.

    Raises:
        UnknownSpeakerError: speaker is not known to the model
    """
    predictions = Predictions()
    model.eval()
    with torch.no_grad():
        for discourse in discourses:
            if isinstance(model, DiscourseProsodyModel):
                batch = model.prepare_discourse(discourse, speaker_override=speaker)
                output = model(batch)
                exported = model.export(batch, output)
                utterance_logits = batch.stage1_style_logits
                discourse_logits = output.style_logits
            else:
                batch = model.collate(list(discourse.utterances), speaker_override=speaker)
                output = model(batch, "infer")
                exported = model.export(output, batch)
                utterance_logits = output.style_logits
                discourse_logits = torch.softmax(output.style_logits, dim=-1).mean(dim=0)

            for target, logits in zip(exported, utterance_logits):
                predictions.features[target.utterance_id] = target
                predictions.utterance_styles[target.utterance_id] = argmax_first(logits.tolist())
            predictions.discourse_styles[discourse.id] = argmax_first(discourse_logits.tolist())
    return predictions


def mean_predictions(reference: ProsodyCorpus, discourses: Sequence[Discourse]) -> Predictions:
    """Mean predictor: the reference corpus mean pitch, energy and scored LPE at every phoneme."""
    lpe = scored_lpe_rows(reference)
    if lpe.size == 0:
        raise ValidationFailure("mean predictor needs a non-empty reference corpus")
    lpe_mean = tuple(float(v) for v in lpe.mean(axis=0))
    pitch = float(np.mean(np.concatenate([np.asarray(t.pitch) for t in reference.targets.values()])))
    energy = float(np.mean(np.concatenate([np.asarray(t.energy) for t in reference.targets.values()])))
    styles = [u.style_label for u in reference.utterances]
    majority = argmax_first(np.bincount(styles).tolist())

    predictions = Predictions()
    for discourse in discourses:
        for utt in discourse.utterances:
            n = utt.num_phonemes
            predictions.features[utt.id] = PhonemeTargets(
                utterance_id=utt.id, pitch=(pitch,) * n, energy=(energy,) * n, lpe=(lpe_mean,) * n
            )
            predictions.utterance_styles[utt.id] = majority
        predictions.discourse_styles[discourse.id] = majority
    return predictions


def mark_predicted_pauses(discourses: Sequence[Discourse], predictions: Predictions,
                          pause_energy_threshold: float) -> List[Discourse]:
    """Set each separator's is_silent from the predicted energy at that separator."""
    marked = []
    for discourse in discourses:
        utterances = []
        for utt in discourse.utterances:
            energy = predictions.features[utt.id].energy
            flags = [energy[k] > pause_energy_threshold for k, p in enumerate(utt.phonemes) if p.is_separator]
            utterances.append(mark_silences(utt, flags))
        marked.append(discourse.model_copy(update={"utterances": tuple(utterances)}))
    return marked


def write_predictions(out_dir: Path, predictions: Predictions, discourses: Sequence[Discourse]) -> None:
    """Write a prediction directory (same layout as a prepared corpus)."""
    out_dir = Path(out_dir)
    (out_dir / FEATURES_DIR).mkdir(parents=True, exist_ok=True)
    records = []
    for discourse in discourses:
        for utt in discourse.utterances:
            with open(out_dir / FEATURES_DIR / f"{utt.id}.feat", "w", encoding="utf-8", newline="\n") as handle:
                write_feature_file(predictions.features[utt.id], handle)
            records.append({"kind": "utterance", "id": utt.id, "style_id": predictions.utterance_styles[utt.id]})
        records.append({"kind": "discourse", "id": discourse.id, "style_id": predictions.discourse_styles[discourse.id]})
    write_styles(records, out_dir / STYLES_FILE)
    with open(out_dir / MANIFEST_NAME, "w", encoding="utf-8", newline="\n") as handle:
        write_manifest(discourses, handle)


def read_styles(path: Path) -> Tuple[Dict[str, int], Dict[str, int]]:
    """styles.jsonl -> (utterance styles, discourse styles)."""
    utterances: Dict[str, int] = {}
    discourses: Dict[str, int] = {}
    with open(path, encoding="utf-8") as handle:
        for line_number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                target = utterances if record["kind"] == "utterance" else discourses
                target[str(record["id"])] = int(record["style_id"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValidationFailure(f"{path}:{line_number}: bad style record ({exc})") from exc
    return utterances, discourses


# --- metrics ------------------------------------------------------------------------------------

class UtteranceScore(BaseModel):
    utterance_id: str
    num_phonemes: int
    lpe_mse: float
    pitch_mse: float
    energy_mse: float
    style_true: int
    style_pred: int


class EvalReport(BaseModel):
    lpe_mse: float = Field(ge=0.0)
    pitch_mse: float = Field(ge=0.0)
    energy_mse: float = Field(ge=0.0)
    utterance_style_accuracy: float = Field(ge=0.0, le=1.0)
    discourse_style_accuracy: float = Field(ge=0.0, le=1.0)
    num_utterances: int
    num_discourses: int
    per_utterance: List[UtteranceScore] = Field(default_factory=list)

    def summary(self) -> Dict[str, float]:
        return self.model_dump(exclude={"per_utterance"})


def score(targets: ProsodyCorpus, predictions: Predictions) -> EvalReport:
    """
    Compare predictions with targets.

    LPE error averages over scored phonemes (non-silent separators excluded)
    and the 3 components; pitch and energy average over every phoneme.

    Raises:
        ValidationFailure: the two utterance sets differ
    """
    expected = {u.id for u in targets.utterances}
    found = set(predictions.features)
    if expected != found:
        missing = sorted(expected - found)[:5]
        extra = sorted(found - expected)[:5]
        raise ValidationFailure(f"utterance sets differ: missing predictions {missing}, unexpected {extra}")

    lpe_sq = lpe_count = pitch_sq = energy_sq = phoneme_count = 0.0
    per_utterance: List[UtteranceScore] = []
    utterance_hits = 0
    for utt in targets.utterances:
        truth = targets.targets[utt.id].as_array()
        guess = predictions.features[utt.id].as_array()
        if truth.shape != guess.shape:
            raise ValidationFailure(f"utterance {utt.id}: prediction has {guess.shape[0]} rows, target {truth.shape[0]}")
        scored = np.asarray([not (p.is_separator and not p.is_silent) for p in utt.phonemes], dtype=bool)
        diff = (guess - truth) ** 2
        u_lpe = diff[scored, 2:]
        lpe_sq += float(u_lpe.sum())
        lpe_count += u_lpe.size
        pitch_sq += float(diff[:, 0].sum())
        energy_sq += float(diff[:, 1].sum())
        phoneme_count += truth.shape[0]

        style_pred = predictions.utterance_styles.get(utt.id, -1)
        utterance_hits += int(style_pred == utt.style_label)
        per_utterance.append(UtteranceScore(
            utterance_id=utt.id,
            num_phonemes=truth.shape[0],
            lpe_mse=float(u_lpe.mean()) if u_lpe.size else 0.0,
            pitch_mse=float(diff[:, 0].mean()),
            energy_mse=float(diff[:, 1].mean()),
            style_true=utt.style_label,
            style_pred=style_pred,
        ))

    discourse_hits = sum(int(predictions.discourse_styles.get(d.id, -1) == d.style_label) for d in targets.discourses)
    return EvalReport(
        lpe_mse=lpe_sq / lpe_count if lpe_count else 0.0,
        pitch_mse=pitch_sq / phoneme_count,
        energy_mse=energy_sq / phoneme_count,
        utterance_style_accuracy=utterance_hits / len(per_utterance),
        discourse_style_accuracy=discourse_hits / len(targets.discourses),
        num_utterances=len(per_utterance),
        num_discourses=len(targets.discourses),
        per_utterance=per_utterance,
    )


def load_predictions(predictions_dir: Path, utterance_ids: Sequence[str]) -> Predictions:
    """Read the feature files and style labels of a prediction (or prepared corpus) directory."""
    predictions_dir = Path(predictions_dir)
    features_dir = predictions_dir / FEATURES_DIR
    if not features_dir.is_dir():
        raise ValidationFailure(f"{predictions_dir} has no {FEATURES_DIR}/ directory")
    available = {p.stem for p in features_dir.glob("*.feat")}
    expected = set(utterance_ids)
    if available != expected:
        raise ValidationFailure(
            f"utterance sets differ: missing predictions {sorted(expected - available)[:5]}, "
            f"unexpected {sorted(available - expected)[:5]}"
        )
    predictions = Predictions()
    for utterance_id in sorted(expected):
        with open(features_dir / f"{utterance_id}.feat", encoding="utf-8") as handle:
            predictions.features[utterance_id] = read_feature_file(handle)
    styles = predictions_dir / STYLES_FILE
    if styles.is_file():
        predictions.utterance_styles, predictions.discourse_styles = read_styles(styles)
    else:
        logger.warning("no style predictions; accuracies will be 0", directory=str(predictions_dir))
    return predictions


def evaluate(predictions_dir: Path, targets_dir: Path) -> EvalReport:
    targets = ProsodyCorpus.load(targets_dir)
    predictions = load_predictions(predictions_dir, [u.id for u in targets.utterances])
    report = score(targets, predictions)
    logger.info("evaluation finished", **{k: round(v, 6) if isinstance(v, float) else v
                                          for k, v in report.summary().items()})
    return report


def write_report(report: EvalReport, out_dir: Path) -> Tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path, csv_path = out_dir / REPORT_JSON, out_dir / REPORT_CSV
    with open(json_path, "w", encoding="utf-8", newline="\n") as handle:
        json.dump(report.summary(), handle, indent=2, sort_keys=True)
        handle.write("\n")
    frame = pd.DataFrame([s.model_dump() for s in report.per_utterance], columns=list(UtteranceScore.model_fields))
    frame.to_csv(csv_path, index=False, lineterminator="\n")
    return json_path, csv_path


# --- contours -----------------------------------------------------------------------------------

def contour_table(features: PhonemeTargets, utt: Optional[Utterance] = None) -> pd.DataFrame:
    """
    Per-phoneme pitch contour.

    A separator row is flagged when the utterance marks it silent (a pause).
    Without an utterance the symbols are unknown and nothing is flagged.
    """
    if utt is not None and utt.num_phonemes != features.num_phonemes:
        raise ValidationFailure(f"utterance {utt.id} has N={utt.num_phonemes}, features have {features.num_phonemes}")
    rows = []
    phonemes = utt.phonemes if utt is not None else [None] * features.num_phonemes
    for k, (phoneme, pitch, energy) in enumerate(zip(phonemes, features.pitch, features.energy)):
        is_separator = phoneme is not None and phoneme.is_separator and phoneme.is_silent
        rows.append({
            "phoneme_index": k,
            "symbol": phoneme.symbol if phoneme is not None else "",
            "pitch": pitch,
            "energy": energy,
            "is_separator": bool(is_separator),
        })
    return pd.DataFrame(rows, columns=CONTOUR_COLUMNS)


def contour_summary(table: pd.DataFrame) -> Dict[str, float]:
    """Voiced pitch range and spread plus the number of pauses."""
    voiced = table[(table["pitch"] > 0) & (table["symbol"] != "/")]["pitch"].to_numpy(dtype=np.float64)
    return {
        "num_phonemes": int(len(table)),
        "pause_count": int(table["is_separator"].sum()),
        "voiced_pitch_range": float(voiced.max() - voiced.min()) if voiced.size else 0.0,
        "voiced_pitch_std": float(voiced.std()) if voiced.size else 0.0,
    }


def write_contour(table: pd.DataFrame, out_csv: Path) -> Path:
    out_csv = Path(out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(out_csv, index=False, lineterminator="\n")
    summary_path = out_csv.with_suffix(".summary.json")
    with open(summary_path, "w", encoding="utf-8", newline="\n") as handle:
        json.dump(contour_summary(table), handle, indent=2, sort_keys=True)
        handle.write("\n")
    return summary_path


# --- comparisons --------------------------------------------------------------------------------

def compare_models(runs: Sequence[Tuple[str, Path]], targets_dir: Path) -> pd.DataFrame:
    """One row per named prediction directory, in the given order."""
    if not runs:
        raise ValidationFailure("nothing to compare")
    targets = ProsodyCorpus.load(targets_dir)
    ids = [u.id for u in targets.utterances]
    rows = []
    for name, directory in runs:
        report = score(targets, load_predictions(directory, ids))
        rows.append({"model": name, **{c: getattr(report, c) for c in COMPARE_COLUMNS[1:]}})
    return pd.DataFrame(rows, columns=COMPARE_COLUMNS)

