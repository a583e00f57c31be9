"""Run-directory plumbing: stable JSON, content hashing, CSV helpers.

Everything written through here is byte-reproducible: keys are sorted,
floats go through repr, and no timestamps are embedded (timestamps live
only in CLI run manifests, which are excluded from reproducibility
hashes).
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from pathlib import Path

__all__ = ["stable_json_dumps", "write_json", "read_json", "sha256_file",
           "sha256_tree", "sha256_text", "write_csv"]

# Files that carry wall-clock metadata and are excluded from tree hashes.
NON_REPRODUCIBLE_FILES = {"run.json"}


def stable_json_dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(stable_json_dumps(obj))


def read_json(path):
    return json.loads(Path(path).read_text())


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_tree(root) -> str:
    """Hash of a directory: sorted relative paths plus file contents."""
    root = Path(root)
    h = hashlib.sha256()
    for path in sorted(root.rglob("*")):
        if not path.is_file() or path.name in NON_REPRODUCIBLE_FILES:
            continue
        h.update(str(path.relative_to(root)).encode())
        h.update(b"\0")
        h.update(path.read_bytes())
    return h.hexdigest()


def write_csv(path, header, rows) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)
