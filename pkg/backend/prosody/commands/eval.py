"""
Eval Command

Scores a prediction directory against a prepared corpus and writes
eval_report.json (summary) and eval_report.csv (per utterance).
"""

from pathlib import Path
from typing import Any, Dict, Optional

from ..errors import UsageError
from ..evaluation import evaluate, write_report
from .base_command import BaseCommand


class EvalCommand(BaseCommand):
    name = "eval"

    def validate_input(self, **kwargs) -> bool:
        for key in ("predictions", "targets"):
            value = kwargs.get(key)
            if value is None or not Path(value).is_dir():
                raise UsageError(f"{key} directory {value} does not exist")
        return True

    def execute(self, predictions: Path, targets: Path, out_dir: Optional[Path] = None, **kwargs) -> Dict[str, Any]:
        report = evaluate(Path(predictions), Path(targets))
        json_path, csv_path = write_report(report, Path(out_dir or predictions))
        return {"report": str(json_path), "per_utterance": str(csv_path), **report.summary()}
