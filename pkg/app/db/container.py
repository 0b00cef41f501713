import json
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np

from app.core.exceptions import ArtifactError


FORMAT_NAME = "dipoed-container"
FORMAT_VERSION = 1
DTYPE = np.dtype("<f8")


def container_paths(base: Union[str, Path]) -> Tuple[Path, Path]:
    """Header and payload paths for a container base path."""
    base = Path(base)
    if base.suffix in (".json", ".bin"):
        base = base.with_suffix("")
    return base.with_suffix(".json"), base.with_suffix(".bin")


def write_container(
    base: Union[str, Path],
    header: dict,
    blocks: Sequence[Tuple[str, np.ndarray]],
) -> List[Path]:
    """Write a JSON header and a raw little-endian float64 sidecar, blocks in order."""
    header_path, payload_path = container_paths(base)
    header_path.parent.mkdir(parents=True, exist_ok=True)

    layout = []
    with open(payload_path, "wb") as payload:
        for name, array in blocks:
            array = np.ascontiguousarray(array, dtype=DTYPE)
            layout.append({"name": name, "shape": list(array.shape)})
            payload.write(array.tobytes(order="C"))

    document = dict(header)
    document["format"] = FORMAT_NAME
    document["version"] = FORMAT_VERSION
    document["blocks"] = layout
    header_path.write_text(json.dumps(document, indent=2, sort_keys=True) + "\n")
    return [header_path, payload_path]


def read_container(base: Union[str, Path]) -> Tuple[dict, Dict[str, np.ndarray]]:
    """Read a container; raises ArtifactError naming the first inconsistent block."""
    header_path, payload_path = container_paths(base)
    if not header_path.exists():
        raise ArtifactError(f"header not found: {header_path}")
    if not payload_path.exists():
        raise ArtifactError(f"payload not found: {payload_path}")

    try:
        header = json.loads(header_path.read_text())
    except json.JSONDecodeError as e:
        raise ArtifactError(f"corrupt header {header_path}: {e}")
    if not isinstance(header, dict) or header.get("format") != FORMAT_NAME:
        raise ArtifactError(f"corrupt header {header_path}: not a {FORMAT_NAME} file")
    layout = header.get("blocks")
    if not isinstance(layout, list):
        raise ArtifactError(f"corrupt header {header_path}: missing block layout")

    payload = payload_path.read_bytes()
    arrays: Dict[str, np.ndarray] = {}
    offset = 0
    for entry in layout:
        try:
            name = str(entry["name"])
            shape = tuple(int(s) for s in entry["shape"])
        except (KeyError, TypeError, ValueError):
            raise ArtifactError(f"corrupt header {header_path}: malformed block entry {entry!r}")
        count = int(np.prod(shape, dtype=np.int64))
        size = count * DTYPE.itemsize
        if offset + size > len(payload):
            raise ArtifactError(
                f"payload {payload_path} truncated: block '{name}' missing "
                f"({len(payload) - offset} of {size} bytes present)"
            )
        arrays[name] = np.frombuffer(payload, dtype=DTYPE, count=count, offset=offset).reshape(shape).copy()
        offset += size
    if offset != len(payload):
        raise ArtifactError(
            f"payload {payload_path} has {len(payload) - offset} bytes beyond the declared blocks"
        )
    return header, arrays


def require_shape(arrays: Dict[str, np.ndarray], name: str, shape: Tuple[int, ...]) -> np.ndarray:
    """Fetch a block and check it against the shape the header implies."""
    if name not in arrays:
        raise ArtifactError(f"block '{name}' missing from payload")
    array = arrays[name]
    if array.shape != tuple(shape):
        raise ArtifactError(
            f"block '{name}' has shape {array.shape}, header implies {tuple(shape)}"
        )
    return array
