import csv
import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.core.config import settings
from app.db.container import write_container


logger = logging.getLogger(__name__)


def to_builtin(value: Any) -> Any:
    """Convert numpy scalars/arrays and pydantic models to JSON-ready builtins."""
    if hasattr(value, "model_dump"):
        return to_builtin(value.model_dump(mode="json"))
    if isinstance(value, dict):
        return {str(k): to_builtin(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_builtin(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_builtin(value.tolist())
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    return value


def dumps(payload: Any) -> str:
    """Deterministic JSON text: sorted keys, repr floats (bit-exact round trip)."""
    return json.dumps(to_builtin(payload), indent=2, sort_keys=True, allow_nan=False) + "\n"


class ArtifactStore:
    """Artifacts of one output directory plus its manifest."""

    MANIFEST = "manifest.json"

    def __init__(self, output_dir: Optional[Union[str, Path]] = None):
        self.root = Path(output_dir or settings.output_dir)
        self.root.mkdir(parents=True, exist_ok=True)
        self._files: List[str] = []

    def path(self, name: str) -> Path:
        return self.root / name

    def track(self, paths: Iterable[Path]) -> None:
        """Record files written by other writers under this command."""
        for p in paths:
            rel = p.relative_to(self.root).as_posix() if p.is_relative_to(self.root) else str(p)
            if rel not in self._files:
                self._files.append(rel)

    def write_json(self, name: str, payload: Any) -> Path:
        """Write a JSON artifact."""
        target = self.path(name)
        target.write_text(dumps(payload))
        self.track([target])
        logger.debug("wrote %s", target)
        return target

    def write_csv(self, name: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
        """Write a CSV table; floats as repr."""
        target = self.path(name)
        with open(target, "w", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
        self.track([target])
        return target

    def write_container(self, name: str, header: dict, blocks: Sequence[Tuple[str, np.ndarray]]) -> Path:
        """Write a header+payload container under the output directory."""
        paths = write_container(self.path(name), to_builtin(header), blocks)
        self.track(paths)
        return paths[0]

    def update_manifest(self, command: str, seed: int, budgets: Optional[Dict[str, int]] = None) -> Path:
        """Merge this command's files, seed and solve budgets into manifest.json."""
        target = self.path(self.MANIFEST)
        manifest: Dict[str, Any] = {"commands": {}}
        if target.exists():
            try:
                manifest = json.loads(target.read_text())
            except json.JSONDecodeError:
                logger.warning("replacing unreadable manifest %s", target)
        manifest.setdefault("commands", {})[command] = {
            "files": sorted(self._files),
            "seed": seed,
            "solve_budget": budgets or {},
        }
        target.write_text(dumps(manifest))
        return target
