"""
Utility functions shared by the experiment handles.

JSON/CSV writers with fixed formatting, content digests for the run
manifest, and the named random streams derived from the master seed.
"""

import csv
import hashlib
import json
import os
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np
from fastmcp.utilities.logging import get_logger

logger = get_logger(__name__)


def to_json_safe(obj: Any) -> Any:
    """
    Convert results to JSON-serializable structures.

    Rules:
    - Primitives returned as-is, numpy scalars unwrapped
    - Complex numbers become {"re": ..., "im": ...}
    - Arrays, lists and tuples converted recursively
    - Dicts converted recursively with stringified keys
    - Objects: try `to_dict()` if available; otherwise use `__dict__` recursively; fallback to `str(obj)`
    """
    if obj is None:
        return None
    if isinstance(obj, (str, bool, int)):
        return obj
    if isinstance(obj, np.generic):
        return to_json_safe(obj.item())
    if isinstance(obj, float):
        return obj if np.isfinite(obj) else str(obj)
    if isinstance(obj, complex):
        return {"re": to_json_safe(obj.real), "im": to_json_safe(obj.imag)}
    if isinstance(obj, np.ndarray):
        return to_json_safe(obj.tolist())
    if isinstance(obj, (list, tuple)):
        return [to_json_safe(x) for x in obj]
    if isinstance(obj, dict):
        return {str(k): to_json_safe(v) for k, v in obj.items()}
    # Try to_dict method
    try:
        to_dict_method = getattr(obj, "to_dict", None)
        if callable(to_dict_method):
            return to_json_safe(to_dict_method())
    except Exception:
        pass
    try:
        d = getattr(obj, "__dict__", None)
        if isinstance(d, dict):
            return {str(k): to_json_safe(v) for k, v in d.items() if not k.startswith("_")}
    except Exception:
        pass
    return str(obj)


def format_float(x: Any) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, (complex, np.complexfloating)):
        return repr(complex(x))
    return str(x)


def write_json(path: str, data: Any) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    text = json.dumps(to_json_safe(data), sort_keys=True, indent=2, ensure_ascii=False) + "\n"
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)
    logger.info(f"wrote {path}")
    return path


def write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    count = 0
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_float(v) for v in row])
            count += 1
    logger.info(f"wrote {path} ({count} rows)")
    return path


def sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(output_dir: str, files: List[str], extra: Optional[Dict[str, Any]] = None) -> str:
    """List every produced file with its SHA-256 digest in `manifest.json`."""
    entries = []
    for path in sorted(set(files)):
        entries.append({
            "file": os.path.relpath(path, output_dir),
            "sha256": sha256_file(path),
            "bytes": os.path.getsize(path),
        })
    doc = {"files": entries}
    if extra:
        doc.update(extra)
    return write_json(os.path.join(output_dir, "manifest.json"), doc)


def stream_key(name: str) -> int:
    """Stable 32-bit key for a named subsystem stream."""
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:4], "little")


def spawn_generators(seed: int, name: str, count: int) -> List[np.random.Generator]:
    """
    Independent counter-based generators for `count` work units of subsystem `name`.

    Unit k always receives the same stream for a given (seed, name), so the
    results never depend on how units are distributed over workers.
    """
    return stream_generators(seed, name, 0, count)


def stream_generators(seed: int, name: str, start: int, count: int) -> List[np.random.Generator]:
    """Units start .. start+count-1 of `name`; unit k is the k-th child of the named SeedSequence."""
    key = stream_key(name)
    return [np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy=int(seed), spawn_key=(key, k))))
            for k in range(start, start + count)]


def generator(seed: int, name: str) -> np.random.Generator:
    return spawn_generators(seed, name, 1)[0]


def markdown_table(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    for row in rows:
        cells = []
        for v in row:
            if isinstance(v, (float, np.floating)):
                cells.append(f"{float(v):.6g}")
            else:
                cells.append(str(v))
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines)
