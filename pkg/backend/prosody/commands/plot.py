"""
Plot-pitch Command

Exports a per-phoneme pitch contour table (no rendering) plus a small JSON
summary for comparing models.
"""

from pathlib import Path
from typing import Any, Dict, Optional

from ..corpus import iter_utterances, parse_manifest
from ..errors import UsageError, ValidationFailure
from ..evaluation import contour_summary, contour_table, write_contour
from ..features import read_feature_file
from ..training import MANIFEST_NAME
from .base_command import BaseCommand


class PlotPitchCommand(BaseCommand):
    """
    Feature or prediction file -> CSV phoneme_index,symbol,pitch,energy,is_separator

    The manifest defaults to manifest.jsonl one level above the features/
    directory holding the file.
    """

    name = "plot-pitch"

    def validate_input(self, **kwargs) -> bool:
        feature_file = kwargs.get("feature_file")
        if feature_file is None or not Path(feature_file).is_file():
            raise UsageError(f"feature file {feature_file} does not exist")
        if kwargs.get("out_csv") is None:
            raise UsageError("--out is required")
        return True

    def execute(self, feature_file: Path, out_csv: Path, manifest: Optional[Path] = None, **kwargs) -> Dict[str, Any]:
        feature_file = Path(feature_file)
        with open(feature_file, encoding="utf-8") as handle:
            features = read_feature_file(handle)

        manifest = Path(manifest) if manifest else feature_file.parent.parent / MANIFEST_NAME
        utt = None
        if manifest.is_file():
            with open(manifest, encoding="utf-8") as handle:
                utt = next((u for u in iter_utterances(parse_manifest(handle)) if u.id == features.utterance_id), None)
            if utt is None:
                raise ValidationFailure(f"utterance {features.utterance_id} is not in {manifest}")
        else:
            self.logger.warning("no manifest; symbols and pauses will be blank", feature_file=str(feature_file))

        table = contour_table(features, utt)
        summary_path = write_contour(table, Path(out_csv))
        return {"out_csv": str(out_csv), "summary": str(summary_path), **contour_summary(table)}
