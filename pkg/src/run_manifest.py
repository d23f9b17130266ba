"""
Run Manifest Module

This module tracks what each command did in an output directory, in a JSON
file next to the outputs. It records the configuration snapshot, the input
and output files, the seed, wall-clock time and final metrics, so that
`synth`, `solve` and `eval` can be chained by pointing each at the previous
command's directory.
"""

import json
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

MANIFEST_NAME = "manifest.json"


class RunManifest:
    """
    Manages the `manifest.json` of one output directory.

    The file holds one entry per command name; recording a command again
    replaces its entry. Paths are stored relative to the directory when they
    live inside it, so a run directory can be moved as a whole.
    """

    def __init__(self, out_dir: Union[str, Path]):
        """
        Initialize the manifest manager.

        Args:
            out_dir: Output directory; created if missing.
        """
        self.out_dir = Path(out_dir)
        self.manifest_file = self.out_dir / MANIFEST_NAME

        # Ensure the directory exists
        self.out_dir.mkdir(parents=True, exist_ok=True)

        if not self.manifest_file.exists():
            self._initialize_file()

    def _initialize_file(self):
        """Create an empty manifest with proper structure."""
        initial_data = {
            "runs": [],
            "metadata": {
                "last_updated": None,
                "total_runs": 0
            }
        }
        self._save(initial_data)

    def _load(self) -> Dict[str, Any]:
        """Load the manifest from JSON."""
        try:
            with open(self.manifest_file, 'r') as f:
                return json.load(f)
        except json.JSONDecodeError as e:
            raise ValueError(f"Corrupted manifest {self.manifest_file}: {e}") from e

    def _save(self, data: Dict[str, Any]):
        """Save the manifest to JSON."""
        with open(self.manifest_file, 'w') as f:
            json.dump(data, f, indent=2)

    def _relative(self, path: Union[str, Path]) -> str:
        path = Path(path)
        try:
            return str(path.resolve().relative_to(self.out_dir.resolve()))
        except ValueError:
            return str(path)

    def record(
        self,
        command: str,
        config: Optional[Dict[str, Any]] = None,
        inputs: Optional[Dict[str, Union[str, Path]]] = None,
        outputs: Optional[Dict[str, Union[str, Path]]] = None,
        seed: Optional[int] = None,
        wall_clock_s: Optional[float] = None,
        metrics: Optional[Dict[str, Any]] = None,
    ) -> Dict[str, Any]:
        """
        Add or replace the entry for `command`.

        Args:
            command: Command name (synth, solve, eval, bench).
            config: Configuration snapshot (plain JSON values).
            inputs: Named input files.
            outputs: Named output files.
            seed: Seed used by the run.
            wall_clock_s: Total run time.
            metrics: Final metrics.

        Returns:
            The stored entry.
        """
        data = self._load()
        entry = {
            "command": command,
            "config": config or {},
            "inputs": {name: str(path) for name, path in (inputs or {}).items()},
            "outputs": {name: self._relative(path) for name, path in (outputs or {}).items()},
            "seed": seed,
            "wall_clock_s": wall_clock_s,
            "metrics": metrics or {},
            "recorded_at": datetime.now().isoformat(),
        }

        data["runs"] = [run for run in data["runs"] if run["command"] != command]
        data["runs"].append(entry)
        data["metadata"]["last_updated"] = entry["recorded_at"]
        data["metadata"]["total_runs"] = len(data["runs"])

        self._save(data)
        return entry

    def load(self) -> Dict[str, Any]:
        """The whole manifest as stored."""
        return self._load()

    def get_run(self, command: str) -> Optional[Dict[str, Any]]:
        """
        Get the entry recorded for a command.

        Returns:
            Dictionary with the run entry, or None if not found
        """
        for run in self._load()["runs"]:
            if run["command"] == command:
                return run
        return None

    def output_path(self, name: str, command: Optional[str] = None) -> Optional[Path]:
        """
        Path of the most recent output called `name` (optionally from one command).
        """
        for run in reversed(self._load()["runs"]):
            if command is not None and run["command"] != command:
                continue
            if name in run["outputs"]:
                return self.out_dir / run["outputs"][name]
        return None

    def missing_outputs(self) -> List[str]:
        """Referenced output files that do not exist on disk."""
        missing = []
        for run in self._load()["runs"]:
            for stored in run["outputs"].values():
                if not (self.out_dir / stored).exists():
                    missing.append(stored)
        return missing


def is_run_dir(path: Union[str, Path]) -> bool:
    """True when `path` is a directory holding a manifest."""
    path = Path(path)
    return path.is_dir() and (path / MANIFEST_NAME).exists()
