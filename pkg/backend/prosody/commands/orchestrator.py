"""
Command Orchestrator

Runs multi-step workflows built from the individual commands and collects
one consolidated result with per-step metadata.
"""

from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import structlog

from ..config import ABLATION_FLAGS, ProsodyConfig
from ..corpus import parse_manifest, split_by_discourse, write_manifest
from ..errors import ValidationFailure
from ..training import MANIFEST_NAME
from .base_command import BaseCommand
from .compare import CompareCommand
from .eval import EvalCommand
from .generate import GenerateCommand
from .infer import InferCommand
from .prepare import PrepareCommand
from .train import TrainCommand


class CommandOrchestrator:
    """
    Command Orchestrator - Coordinates multi-step workflows

    1. full_pipeline: generate -> split -> prepare -> train stage 1 -> train stage 2 -> infer -> eval
    2. ablation_study: train the full model and every ablation on one split, then compare

    A failed step stops the workflow; the steps run so far are reported.
    """

    def __init__(self, config: Optional[ProsodyConfig] = None):
        self.config = config or ProsodyConfig()
        self.logger = structlog.get_logger(f"{__name__}.{self.__class__.__name__}")
        self.commands: Dict[str, BaseCommand] = {
            "generate": GenerateCommand(self.config),
            "prepare": PrepareCommand(self.config),
            "train": TrainCommand(self.config),
            "infer": InferCommand(self.config),
            "eval": EvalCommand(self.config),
            "compare": CompareCommand(self.config),
        }
        self.workflows = {
            "full_pipeline": self._full_pipeline_workflow,
            "ablation_study": self._ablation_study_workflow,
        }

    def execute_workflow(self, workflow_name: str, **kwargs) -> Dict[str, Any]:
        if workflow_name not in self.workflows:
            raise ValidationFailure(f"Unknown workflow: {workflow_name}")

        workflow_start = datetime.now()
        workflow_id = f"{workflow_name}_{int(workflow_start.timestamp())}"
        steps: List[Dict[str, Any]] = []
        self.logger.info(f"Starting workflow: {workflow_name} (ID: {workflow_id})")

        try:
            result = self.workflows[workflow_name](steps, **kwargs)
            result["success"] = True
            self.logger.info(f"Workflow completed: {workflow_name}")
        except Exception as e:
            self.logger.error(f"Workflow failed: {workflow_name} - {e}")
            result = {"success": False, "error": str(e), "error_type": type(e).__name__}

        result["steps"] = steps
        result["workflow_metadata"] = {
            "workflow_id": workflow_id,
            "workflow_name": workflow_name,
            "started_at": workflow_start,
            "completed_at": datetime.now(),
            "total_duration": (datetime.now() - workflow_start).total_seconds(),
        }
        return result

    def _step(self, steps: List[Dict[str, Any]], command: str, label: Optional[str] = None, **kwargs) -> Dict[str, Any]:
        outcome = self.commands[command].run(**kwargs)
        steps.append({
            "step": label or command,
            "success": outcome["success"],
            "execution_time": outcome["metadata"]["execution_time"],
        })
        if not outcome["success"]:
            raise ValidationFailure(f"step '{label or command}' failed: {outcome['error']}")
        data = outcome["data"]
        if data.get("rejected"):
            raise ValidationFailure(f"step '{label or command}' rejected {len(data['rejected'])} utterance(s)")
        return data

    def _split_and_prepare(self, steps: List[Dict[str, Any]], corpus_dir: Path, work_dir: Path,
                           test_fraction: float) -> Dict[str, Path]:
        with open(corpus_dir / MANIFEST_NAME, encoding="utf-8") as handle:
            discourses = parse_manifest(handle)
        train, test = split_by_discourse(discourses, test_fraction, self.config.seed)

        prepared = {}
        for name, part in (("train", train), ("test", test)):
            split_dir = work_dir / "splits" / name
            split_dir.mkdir(parents=True, exist_ok=True)
            with open(split_dir / MANIFEST_NAME, "w", encoding="utf-8", newline="\n") as handle:
                write_manifest(part, handle)
            prepared[name] = work_dir / "prepared" / name
            self._step(steps, "prepare", f"prepare_{name}", manifest=split_dir / MANIFEST_NAME,
                       frames_dir=corpus_dir / "frames", align_dir=corpus_dir / "align",
                       lpe_dir=corpus_dir / "lpe", out_dir=prepared[name])
        return prepared

    def _full_pipeline_workflow(self, steps: List[Dict[str, Any]], work_dir: Path,
                                generator_options: Optional[Dict[str, Any]] = None,
                                test_fraction: float = 0.2, **kwargs) -> Dict[str, Any]:
        work_dir = Path(work_dir)
        corpus_dir = work_dir / "corpus"
        self._step(steps, "generate", out_dir=corpus_dir, options=generator_options)
        prepared = self._split_and_prepare(steps, corpus_dir, work_dir, test_fraction)

        checkpoints = {1: work_dir / "checkpoints" / "stage1.pt", 2: work_dir / "checkpoints" / "stage2.pt"}
        self._step(steps, "train", "train_stage1", stage=1, corpus=prepared["train"], out=checkpoints[1])
        self._step(steps, "train", "train_stage2", stage=2, corpus=prepared["train"], out=checkpoints[2],
                   init_from=checkpoints[1])

        reports = {}
        for stage, checkpoint in checkpoints.items():
            predictions = work_dir / "predictions" / f"stage{stage}"
            self._step(steps, "infer", f"infer_stage{stage}", checkpoint=checkpoint,
                       manifest=prepared["test"] / MANIFEST_NAME, out_dir=predictions)
            reports[f"stage{stage}"] = self._step(steps, "eval", f"eval_stage{stage}",
                                                  predictions=predictions, targets=prepared["test"])
        return {"work_dir": str(work_dir), "reports": reports}

    def _ablation_study_workflow(self, steps: List[Dict[str, Any]], work_dir: Path, corpus_dir: Path,
                                 flags: Sequence[str] = ABLATION_FLAGS, test_fraction: float = 0.2,
                                 **kwargs) -> Dict[str, Any]:
        work_dir, corpus_dir = Path(work_dir), Path(corpus_dir)
        prepared = self._split_and_prepare(steps, corpus_dir, work_dir, test_fraction)

        runs = []
        for name, ablation in [("full", [])] + [(f"w/o {flag[3:]}", [flag]) for flag in flags]:
            slug = "full" if not ablation else ablation[0]
            checkpoint = work_dir / "checkpoints" / f"{slug}.pt"
            predictions = work_dir / "predictions" / slug
            self._step(steps, "train", f"train_{slug}", stage=1, corpus=prepared["train"], out=checkpoint,
                       ablation=ablation)
            self._step(steps, "infer", f"infer_{slug}", checkpoint=checkpoint,
                       manifest=prepared["test"] / MANIFEST_NAME, out_dir=predictions)
            runs.append(f"{name}={predictions}")

        table = self._step(steps, "compare", runs=runs, targets=prepared["test"],
                           out_csv=work_dir / "ablation.csv")
        return {"work_dir": str(work_dir), "table": table}
