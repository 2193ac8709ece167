"""
Generate Command

Writes a synthetic corpus with a known LPE law.
"""

from pathlib import Path
from typing import Any, Dict, Optional

from ..errors import UsageError
from ..synthgen import GeneratorSpec, generate
from .base_command import BaseCommand


class GenerateCommand(BaseCommand):
    name = "generate"

    def validate_input(self, **kwargs) -> bool:
        if kwargs.get("out_dir") is None:
            raise UsageError("--out is required")
        return True

    def execute(self, out_dir: Path, options: Optional[Dict[str, Any]] = None, **kwargs) -> Dict[str, Any]:
        options = {k: v for k, v in (options or {}).items() if v is not None}
        options.setdefault("seed", self.config.seed)
        spec = GeneratorSpec.model_validate(options)
        law = generate(spec, Path(out_dir))
        return {
            "out_dir": str(out_dir),
            "law": law.law,
            "utterances": spec.num_discourses * spec.utterances_per_discourse,
            "offset_margin": law.offset_margin,
        }
