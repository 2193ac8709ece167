"""
Compare Command

Builds an ablation table (one row per model) from several prediction
directories scored against one prepared corpus.
"""

from pathlib import Path
from typing import Any, Dict, List, Sequence, Tuple

from ..errors import UsageError
from ..evaluation import compare_models
from .base_command import BaseCommand


def parse_runs(specs: Sequence[str]) -> List[Tuple[str, Path]]:
    """'name=dir' strings -> [(name, dir)]."""
    runs = []
    for spec in specs:
        name, sep, directory = spec.partition("=")
        if not sep or not name or not directory:
            raise UsageError(f"expected NAME=DIR, got {spec!r}")
        runs.append((name, Path(directory)))
    return runs


class CompareCommand(BaseCommand):
    name = "compare"

    def validate_input(self, **kwargs) -> bool:
        runs = parse_runs(kwargs.get("runs") or [])
        if not runs:
            raise UsageError("at least one NAME=DIR run is required")
        names = [name for name, _ in runs]
        if len(set(names)) != len(names):
            raise UsageError(f"duplicate run names in {names}")
        targets = kwargs.get("targets")
        if targets is None or not Path(targets).is_dir():
            raise UsageError(f"targets directory {targets} does not exist")
        if kwargs.get("out_csv") is None:
            raise UsageError("--out is required")
        return True

    def execute(self, runs: Sequence[str], targets: Path, out_csv: Path, **kwargs) -> Dict[str, Any]:
        table = compare_models(parse_runs(runs), Path(targets))
        out_csv = Path(out_csv)
        out_csv.parent.mkdir(parents=True, exist_ok=True)
        table.to_csv(out_csv, index=False, lineterminator="\n")
        return {"out_csv": str(out_csv), "rows": table.to_dict(orient="records")}
