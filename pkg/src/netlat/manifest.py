"""Run manifests: what a command read, wrote and was seeded with."""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

MANIFEST_NAME = "manifest.json"


def content_hash(path: str | os.PathLike) -> str:
    """Git blob id of a file (sha1 over ``blob <size>\\0`` + bytes)."""
    data = Path(path).read_bytes()
    h = hashlib.sha1()
    h.update(b"blob %d\0" % len(data))
    h.update(data)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    seeds: list[int]
    inputs: dict[str, str] = field(default_factory=dict)      # path -> content hash
    configs: dict[str, str] = field(default_factory=dict)     # path -> content hash
    outputs: list[str] = field(default_factory=list)
    timestamp: str = ""

    def add_input(self, path: str | os.PathLike, config: bool = False) -> None:
        target = self.configs if config else self.inputs
        target[str(path)] = content_hash(path)

    def write(self, out_dir: str | os.PathLike) -> Path:
        out = Path(out_dir)
        self.timestamp = self.timestamp or datetime.now(timezone.utc).isoformat(timespec="seconds")
        path = out / MANIFEST_NAME
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, path: str | os.PathLike) -> "RunManifest":
        p = Path(path)
        if p.is_dir():
            p = p / MANIFEST_NAME
        return cls(**json.loads(p.read_text()))


def verify(manifest: RunManifest) -> list[str]:
    """Paths whose current content no longer matches the recorded hash (or that vanished)."""
    stale = []
    for path, digest in {**manifest.inputs, **manifest.configs}.items():
        if not Path(path).is_file() or content_hash(path) != digest:
            stale.append(path)
    return stale
