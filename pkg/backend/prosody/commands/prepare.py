"""
Prepare Command

Turns a manifest plus frame tracks, alignments and LPE streams into a
prepared corpus directory:
1. features/<utterance_id>.feat for every accepted utterance
2. manifest.jsonl (with separator pauses marked) and styles.jsonl (reference labels)
3. prepare_report.json listing rejected utterances and why
"""

import json
from pathlib import Path
from typing import Any, Dict, List, Optional

from ..corpus import Utterance, iter_utterances, parse_manifest, write_manifest
from ..errors import ProsodyError, UsageError, ValidationFailure
from ..features import build_targets, read_alignment, read_frame_track, read_lpe_stream, write_feature_file
from ..synthgen import STYLES_FILE, write_styles
from ..training import FEATURES_DIR, MANIFEST_NAME
from .base_command import BaseCommand

REPORT_NAME = "prepare_report.json"


def _lpe_path(lpe_dir: Path, utterance_id: str) -> Optional[Path]:
    for suffix in (".lpe", ".feat"):
        candidate = lpe_dir / f"{utterance_id}{suffix}"
        if candidate.is_file():
            return candidate
    return None


class PrepareCommand(BaseCommand):
    """
    Feature preparation - per-utterance targets from acoustic inputs

    Every utterance is processed independently; a failure rejects that
    utterance only and is listed in the report.
    """

    name = "prepare"

    def validate_input(self, **kwargs) -> bool:
        manifest = kwargs.get("manifest")
        if manifest is None or not Path(manifest).is_file():
            raise UsageError(f"manifest {manifest} does not exist")
        for key in ("frames_dir", "align_dir", "lpe_dir"):
            value = kwargs.get(key)
            if value is None or not Path(value).is_dir():
                raise UsageError(f"--{key.replace('_', '-')} {value} is not a directory")
        if kwargs.get("out_dir") is None:
            raise UsageError("--out is required")
        return True

    def execute(self, manifest: Path, frames_dir: Path, align_dir: Path, lpe_dir: Path,
                out_dir: Path, **kwargs) -> Dict[str, Any]:
        manifest, out_dir = Path(manifest), Path(out_dir)
        with open(manifest, encoding="utf-8") as handle:
            discourses = parse_manifest(handle)
        (out_dir / FEATURES_DIR).mkdir(parents=True, exist_ok=True)

        accepted: List[str] = []
        marked: Dict[str, Utterance] = {}
        rejected: List[Dict[str, str]] = []
        for utt in iter_utterances(discourses):
            try:
                marked[utt.id], targets = self._prepare_one(utt, Path(frames_dir), Path(align_dir), Path(lpe_dir))
            except (ProsodyError, OSError) as exc:
                reason = f"{type(exc).__name__}: {exc}"
                rejected.append({"utterance_id": utt.id, "reason": reason})
                self.logger.warning("utterance rejected", utterance_id=utt.id, reason=reason)
                continue
            with open(out_dir / FEATURES_DIR / f"{utt.id}.feat", "w", encoding="utf-8", newline="\n") as handle:
                write_feature_file(targets, handle)
            accepted.append(utt.id)

        # the manifest is rewritten with the separator pauses found in the alignments
        discourses = [
            d.model_copy(update={"utterances": tuple(marked.get(u.id, u) for u in d.utterances)}) for d in discourses
        ]
        with open(out_dir / MANIFEST_NAME, "w", encoding="utf-8", newline="\n") as handle:
            write_manifest(discourses, handle)
        records = [{"kind": "utterance", "id": u.id, "style_id": u.style_label} for u in iter_utterances(discourses)]
        records += [{"kind": "discourse", "id": d.id, "style_id": d.style_label} for d in discourses]
        write_styles(records, out_dir / STYLES_FILE)

        report = {"accepted": len(accepted), "rejected": rejected}
        with open(out_dir / REPORT_NAME, "w", encoding="utf-8", newline="\n") as handle:
            json.dump(report, handle, indent=2, sort_keys=True, ensure_ascii=False)
            handle.write("\n")
        self.logger.info("preparation finished", accepted=len(accepted), rejected=len(rejected))
        return {"out_dir": str(out_dir), "accepted": len(accepted), "rejected": rejected}

    @staticmethod
    def _prepare_one(utt, frames_dir: Path, align_dir: Path, lpe_dir: Path):
        with open(frames_dir / f"{utt.id}.frames", encoding="utf-8") as handle:
            track = read_frame_track(handle)
        with open(align_dir / f"{utt.id}.align", encoding="utf-8") as handle:
            align = read_alignment(handle)
        lpe_path = _lpe_path(lpe_dir, utt.id)
        if lpe_path is None:
            raise FileNotFoundError(f"no LPE file for {utt.id} in {lpe_dir}")
        with open(lpe_path, encoding="utf-8") as handle:
            lpe_id, rows = read_lpe_stream(handle)
        if lpe_id != utt.id:
            raise ValidationFailure(f"LPE file {lpe_path.name} is for utterance '{lpe_id}'")
        return build_targets(utt, track, align, rows)
