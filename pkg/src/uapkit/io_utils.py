"""Checksums and canonical manifest serialization.

Manifests are written in a canonical JSON form (sorted keys, fixed
indentation, no timestamps) so that repeated deterministic runs produce
byte-identical files and their checksums can be compared directly.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def write_json(path: str | Path, obj) -> str:
    """Write canonical JSON, return its sha256."""
    text = canonical_json(obj)
    Path(path).write_text(text)
    return sha256_bytes(text.encode("utf-8"))


def read_json(path: str | Path):
    return json.loads(Path(path).read_text())


def state_dict_checksum(state_dict) -> str:
    """Checksum over raw tensor bytes in sorted key order.

    Independent of the torch.save container format, so two trainings that
    land on identical parameters hash identically.
    """
    h = hashlib.sha256()
    for key in sorted(state_dict.keys()):
        h.update(key.encode("utf-8"))
        tensor = state_dict[key]
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
