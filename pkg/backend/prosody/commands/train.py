"""
Train Command

Stage 1 trains the utterance model from a prepared corpus; stage 2 needs
--init-from pointing at a stage-1 checkpoint and trains the discourse model
on top of it. The loss history is written next to the checkpoint.
"""

from pathlib import Path
from typing import Any, Dict, Optional, Sequence

from ..checkpoint import load_checkpoint
from ..config import ProsodyConfig
from ..errors import UsageError
from ..training import ProsodyCorpus, train_stage1, train_stage2
from .base_command import BaseCommand


def history_path_for(checkpoint: Path) -> Path:
    checkpoint = Path(checkpoint)
    return checkpoint.with_name(checkpoint.stem + ".history.csv")


def with_ablation(config: ProsodyConfig, flags: Optional[Sequence[str]]) -> ProsodyConfig:
    """Config with extra ablation flags merged in (validated by the config model)."""
    if not flags:
        return config
    merged = sorted(set(config.ablation.flags) | set(flags))
    return ProsodyConfig.model_validate({**config.model_dump(), "ablation": {"flags": merged}})


class TrainCommand(BaseCommand):
    """
    Two-stage training entry point

    1. --stage 1: corpus -> stage-1 checkpoint
    2. --stage 2: corpus + --init-from stage-1 checkpoint -> stage-2 checkpoint
    """

    name = "train"

    def validate_input(self, **kwargs) -> bool:
        stage = kwargs.get("stage")
        if stage not in (1, 2):
            raise UsageError(f"--stage must be 1 or 2, got {stage!r}")
        if stage == 2 and not kwargs.get("init_from"):
            raise UsageError("--stage 2 requires --init-from <stage-1 checkpoint>")
        if stage == 1 and kwargs.get("init_from"):
            raise UsageError("--init-from only applies to --stage 2")
        corpus = kwargs.get("corpus")
        if corpus is None or not Path(corpus).is_dir():
            raise UsageError(f"--corpus {corpus} is not a directory")
        if kwargs.get("out") is None:
            raise UsageError("--out is required")
        return True

    def execute(self, stage: int, corpus: Path, out: Path, init_from: Optional[Path] = None,
                ablation: Optional[Sequence[str]] = None, **kwargs) -> Dict[str, Any]:
        config = with_ablation(self.config, ablation)
        history = history_path_for(out)

        if stage == 1:
            prosody_corpus = ProsodyCorpus.load(Path(corpus))
            result = train_stage1(prosody_corpus, config, out=Path(out), history_path=history)
        else:
            stage1 = load_checkpoint(Path(init_from))
            # stage 2 only accepts ids the stage-1 model was built for
            prosody_corpus = ProsodyCorpus.load(Path(corpus), speakers=range(stage1.num_speakers),
                                                styles=range(stage1.num_styles))
            result = train_stage2(prosody_corpus, stage1, config, out=Path(out), history_path=history)

        final = result.history.iloc[-1].to_dict() if len(result.history) else {}
        return {
            "stage": stage,
            "checkpoint": str(out),
            "history": str(history),
            "steps": result.steps,
            "final_losses": {k: float(v) for k, v in final.items()},
            "ablation": list(config.ablation.flags),
        }
