"""
Infer Command

Predicts per-phoneme pitch, energy and LPE plus style labels from text and
a speaker id. Stage-2 checkpoints run the discourse path.
"""

from pathlib import Path
from typing import Any, Dict, Optional

from ..checkpoint import load_checkpoint
from ..corpus import parse_manifest
from ..errors import UnknownSpeakerError, UsageError
from ..evaluation import mark_predicted_pauses, predict, write_predictions
from .base_command import BaseCommand


class InferCommand(BaseCommand):
    """Checkpoint + manifest -> prediction directory (features/, styles.jsonl, manifest.jsonl)."""

    name = "infer"

    def validate_input(self, **kwargs) -> bool:
        for key in ("checkpoint", "manifest"):
            value = kwargs.get(key)
            if value is None or not Path(value).is_file():
                raise UsageError(f"{key} {value} does not exist")
        if kwargs.get("out_dir") is None:
            raise UsageError("--out is required")
        return True

    def execute(self, checkpoint: Path, manifest: Path, out_dir: Path, speaker: Optional[int] = None,
                **kwargs) -> Dict[str, Any]:
        loaded = load_checkpoint(Path(checkpoint))
        if speaker is not None and not 0 <= speaker < loaded.num_speakers:
            raise UnknownSpeakerError(speaker, range(loaded.num_speakers))

        with open(manifest, encoding="utf-8") as handle:
            # an explicit --speaker replaces every manifest speaker id
            known_speakers = None if speaker is not None else range(loaded.num_speakers)
            discourses = parse_manifest(handle, speakers=known_speakers, styles=range(loaded.num_styles))
        model = loaded.build_model()
        predictions = predict(model, discourses, speaker=speaker)
        discourses = mark_predicted_pauses(discourses, predictions, self.config.eval.pause_energy_threshold)
        write_predictions(Path(out_dir), predictions, discourses)

        self.logger.info("predictions written", out_dir=str(out_dir), stage=loaded.stage,
                         utterances=len(predictions.features))
        return {"out_dir": str(out_dir), "stage": loaded.stage, "utterances": len(predictions.features)}
