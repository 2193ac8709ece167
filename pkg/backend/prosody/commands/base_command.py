"""
Base Command Class for the prosody toolkit

All commands inherit from this base class which provides:
- Configuration handling
- Error handling and logging
- Uniform result envelopes and exit codes
- Performance tracking
"""

import time
from abc import ABC, abstractmethod
from datetime import datetime
from typing import Any, Dict, Optional

import structlog
from pydantic import BaseModel

from ..config import ProsodyConfig
from ..errors import UsageError

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


class CommandMetrics(BaseModel):
    """Performance metrics for command runs."""
    total_calls: int = 0
    successful_calls: int = 0
    failed_calls: int = 0
    average_run_time: float = 0.0
    last_call_time: Optional[datetime] = None


class BaseCommand(ABC):
    """
    Abstract base class for all command-line operations.

    This class provides:
    - Input validation before any work starts
    - A result envelope with metadata for every run
    - Exit-code mapping (0 success, 1 validation failure, 2 usage error)
    - Metrics collection
    """

    name: str = "command"

    def __init__(self, config: Optional[ProsodyConfig] = None):
        self.config = config or ProsodyConfig()
        self.metrics = CommandMetrics()
        self.logger = structlog.get_logger(f"{__name__}.{self.__class__.__name__}")
        self.logger.debug(f"Initialized command: {self.name}")

    @abstractmethod
    def execute(self, **kwargs) -> Dict[str, Any]:
        """
        Execute the command's primary function.

        Returns:
            Dict containing command results
        """

    @abstractmethod
    def validate_input(self, **kwargs) -> bool:
        """
        Validate arguments for this command.

        Raises:
            UsageError: with a message naming the bad argument
        """

    def run(self, **kwargs) -> Dict[str, Any]:
        """
        Execute with validation, timing and error capture.

        Returns:
            Dict with results and metadata; never raises for domain errors
        """
        start_time = time.time()
        call_id = f"{self.name}_{int(start_time)}"

        try:
            if not self.validate_input(**kwargs):
                raise UsageError(f"invalid arguments for '{self.name}'")

            result = self.execute(**kwargs)

            execution_time = time.time() - start_time
            self._update_metrics(success=True, execution_time=execution_time)
            self.logger.info(f"Command {self.name} completed in {execution_time:.2f}s")

            return {
                "success": True,
                "data": result,
                "metadata": {
                    "command": self.name,
                    "call_id": call_id,
                    "execution_time": execution_time,
                    "timestamp": datetime.now(),
                },
            }

        except Exception as e:
            execution_time = time.time() - start_time
            self._update_metrics(success=False, execution_time=execution_time)
            self.logger.error(f"Command {self.name} failed: {e}", error_type=type(e).__name__)

            return {
                "success": False,
                "error": str(e),
                "metadata": {
                    "command": self.name,
                    "call_id": call_id,
                    "execution_time": execution_time,
                    "timestamp": datetime.now(),
                    "error_type": type(e).__name__,
                },
            }

    @staticmethod
    def exit_code(result: Dict[str, Any]) -> int:
        if result.get("success"):
            data = result.get("data") or {}
            return EXIT_FAILURE if data.get("rejected") else EXIT_OK
        if result.get("metadata", {}).get("error_type") == UsageError.__name__:
            return EXIT_USAGE
        return EXIT_FAILURE

    def _update_metrics(self, success: bool, execution_time: float) -> None:
        self.metrics.total_calls += 1
        if success:
            self.metrics.successful_calls += 1
        else:
            self.metrics.failed_calls += 1

        # running average
        n = self.metrics.total_calls
        self.metrics.average_run_time = (self.metrics.average_run_time * (n - 1) + execution_time) / n
        self.metrics.last_call_time = datetime.now()
