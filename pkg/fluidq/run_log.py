import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from datetime import datetime
from typing import Any, Dict, List, Optional

logger = logging.getLogger(__name__)


def model_fingerprint(text: str) -> str:
    """sha256 of the model file contents"""
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclass
class RunReport:
    """Record of one CLI invocation; written even when the run fails."""

    command: List[str]
    model_fingerprint: Optional[str] = None
    variant: Optional[str] = None
    scheme: Optional[str] = None
    parameters: Dict[str, Any] = field(default_factory=dict)
    iterations: Optional[int] = None
    wall_time: float = 0.0
    outputs: List[str] = field(default_factory=list)
    status: str = "ok"
    error: Optional[str] = None
    diagnostics: Dict[str, Any] = field(default_factory=dict)

    def add_output(self, path: str):
        if path not in self.outputs:
            self.outputs.append(path)

    def fail(self, exc: BaseException):
        self.status = "error"
        self.error = f"{type(exc).__name__}: {exc}"

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def write(self, path: str):
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)


class RunLog:
    """Track solver runs across invocations in a JSON history file"""

    def __init__(self, log_file: str = "fluidq_runs.json"):
        """
        Initialize the run history

        Args:
            log_file: Path to the JSON file for storing the history
        """
        self.log_file = log_file
        self.history = self._load_history()

    def _load_history(self) -> Dict:
        """Load the history from file or create a new one if missing or unreadable"""
        if os.path.exists(self.log_file):
            try:
                with open(self.log_file, "r") as f:
                    return json.load(f)
            except (OSError, json.JSONDecodeError) as exc:
                logger.warning("ignoring unreadable run history %s: %s", self.log_file, exc)
        return self._create_default_history()

    def _create_default_history(self) -> Dict:
        return {"runs": [], "variants": {}}

    def _save_history(self):
        try:
            with open(self.log_file, "w") as f:
                json.dump(self.history, f, indent=2)
        except OSError as exc:
            logger.warning("could not save run history to %s: %s", self.log_file, exc)

    def record_run(self, report: RunReport):
        """
        Append a run and update the per-variant tallies

        Args:
            report: The finished RunReport
        """
        entry = report.to_dict()
        entry["timestamp"] = datetime.now().isoformat()
        self.history["runs"].append(entry)

        variant = report.variant or "none"
        tally = self.history["variants"].setdefault(variant, {"runs": 0, "failures": 0, "iterations": 0})
        tally["runs"] += 1
        if report.status != "ok":
            tally["failures"] += 1
        tally["iterations"] += report.iterations or 0
        logger.debug("recorded %s run for variant %s", report.status, variant)
        self._save_history()

    def get_variant_summary(self) -> List[Dict]:
        """Per-variant run counts, failure counts and mean iterations, sorted by run count"""
        summary = []
        for variant, tally in self.history["variants"].items():
            succeeded = tally["runs"] - tally["failures"]
            summary.append({
                "variant": variant,
                "runs": tally["runs"],
                "failures": tally["failures"],
                "mean_iterations": tally["iterations"] / succeeded if succeeded else 0.0,
            })
        return sorted(summary, key=lambda x: x["runs"], reverse=True)

    def get_recent_runs(self, limit: int = 10) -> List[Dict]:
        """Most recent runs first"""
        return sorted(self.history["runs"], key=lambda x: x["timestamp"], reverse=True)[:limit]
