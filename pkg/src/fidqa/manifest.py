"""Provenance sidecars: which inputs (by content hash) produced an artifact.

Each pipeline stage writes ``<output>.meta.json`` (or ``manifest.json``
inside an output directory). No timestamps or hostnames are recorded, so
re-running a stage on the same inputs rewrites the same bytes.
"""

from __future__ import annotations

import hashlib
import json
from collections.abc import Mapping
from pathlib import Path
from typing import Any

from . import __version__


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sidecar_path(output: str | Path) -> Path:
    out = Path(output)
    return out / "manifest.json" if out.is_dir() else out.with_name(out.name + ".meta.json")


def write_manifest(output: str | Path, stage: str, inputs: Mapping[str, str | Path | None],
                   config: Mapping[str, Any], results: Mapping[str, Any] | None = None) -> Path:
    record = {
        "stage": stage,
        "fidqa_version": __version__,
        "inputs": {role: {"path": str(p), "sha256": sha256_file(p)}
                   for role, p in sorted(inputs.items()) if p is not None},
        "config": dict(config),
        "output": str(output),
    }
    if results:
        record["results"] = dict(results)
    path = sidecar_path(output)
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
