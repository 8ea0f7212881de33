"""Checkpoint directories: a key=value manifest plus raw float64 tensor files.

Layout::

    run/checkpoint/
        manifest.txt      # meta.<key> = value, tensor.<group>.<name> = file:offset:shape
        encoder.bin       # one little-endian float64 blob per tensor group
        adapter.bin
        ...

Offsets are in bytes from the start of the group file; shapes are
``x``-separated (an empty shape is a scalar).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

MANIFEST = "manifest.txt"
FORMAT_VERSION = "1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, meta: dict[str, object], groups: dict[str, dict[str, np.ndarray]]) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lines = ["# hypelora checkpoint", f"format = {FORMAT_VERSION}"]
    for key, value in meta.items():
        lines.append(f"meta.{key} = {value}")
    for group, tensors in groups.items():
        fname = f"{group}.bin"
        offset = 0
        with (path / fname).open("wb") as fh:
            for name, arr in tensors.items():
                raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
                fh.write(raw)
                shape = "x".join(str(s) for s in np.shape(arr))
                lines.append(f"tensor.{group}.{name} = {fname}:{offset}:{shape}")
                offset += len(raw)
    (path / MANIFEST).write_text("\n".join(lines) + "\n")
    return path


def read_manifest(path) -> dict[str, str]:
    path = Path(path)
    manifest = path / MANIFEST if path.is_dir() else path
    if not manifest.exists():
        raise CheckpointError(f"no manifest at {manifest}")
    entries: dict[str, str] = {}
    for lineno, line in enumerate(manifest.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError(f"{manifest}:{lineno}: expected key = value")
        entries[key.strip()] = value.strip()
    if entries.get("format") != FORMAT_VERSION:
        raise CheckpointError(f"{manifest}: unsupported format {entries.get('format')!r}")
    return entries


def load_checkpoint(path) -> tuple[dict[str, str], dict[str, dict[str, np.ndarray]]]:
    """Return ``(meta, groups)`` as written by :func:`save_checkpoint`."""
    path = Path(path)
    entries = read_manifest(path)
    meta = {k[len("meta."):]: v for k, v in entries.items() if k.startswith("meta.")}
    groups: dict[str, dict[str, np.ndarray]] = {}
    blobs: dict[str, bytes] = {}
    for key, value in entries.items():
        if not key.startswith("tensor."):
            continue
        group, name = key[len("tensor."):].split(".", 1)
        try:
            fname, offset, shape = value.split(":")
            dims = tuple(int(s) for s in shape.split("x")) if shape else ()
            offset = int(offset)
        except ValueError:
            raise CheckpointError(f"bad tensor entry {key} = {value}") from None
        if fname not in blobs:
            blobs[fname] = (path / fname).read_bytes()
        count = int(np.prod(dims, dtype=np.int64))
        end = offset + 8 * count
        if end > len(blobs[fname]):
            raise CheckpointError(f"{fname} is too short for tensor {group}.{name}")
        arr = np.frombuffer(blobs[fname], dtype="<f8", count=count, offset=offset)
        groups.setdefault(group, {})[name] = arr.astype(np.float64).reshape(dims)
    return meta, groups
