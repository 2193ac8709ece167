"""
Command-line operations for the prosody toolkit.
"""

from .base_command import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, BaseCommand, CommandMetrics
from .compare import CompareCommand
from .eval import EvalCommand
from .generate import GenerateCommand
from .infer import InferCommand
from .orchestrator import CommandOrchestrator
from .plot import PlotPitchCommand
from .prepare import PrepareCommand
from .train import TrainCommand

__all__ = [
    "BaseCommand",
    "CommandMetrics",
    "CommandOrchestrator",
    "CompareCommand",
    "EvalCommand",
    "GenerateCommand",
    "InferCommand",
    "PlotPitchCommand",
    "PrepareCommand",
    "TrainCommand",
    "EXIT_OK",
    "EXIT_FAILURE",
    "EXIT_USAGE",
]
