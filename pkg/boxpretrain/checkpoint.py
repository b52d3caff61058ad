"""Binary array container and checkpoint directories.

Container layout (little-endian)::

    b"ALNDET1\\n"
    u32 array count
    per array: u16 name length, UTF-8 name, u8 rank, rank x u32 dims,
               float32 payload
    u32 CRC32 of every preceding byte
"""

from __future__ import annotations

import json
import logging
import shutil
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

logger = logging.getLogger(__name__)

MAGIC = b"ALNDET1\n"
ARRAYS_FILENAME = "arrays.bin"
MANIFEST_FILENAME = "manifest.json"
MANIFEST_VERSION = 1
CHECKPOINT_KINDS = ("image", "box", "finetune")


class CheckpointError(RuntimeError):
    """Raised when a container or checkpoint directory is malformed."""


def encode_arrays(arrays: Mapping[str, np.ndarray]) -> bytes:
    """Serialize named arrays; entries keep the mapping's iteration order."""

    chunks = [MAGIC, struct.pack("<I", len(arrays))]
    for name, value in arrays.items():
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise CheckpointError(f"Array name too long: {name[:40]}...")
        arr = np.asarray(value, dtype="<f4")
        if arr.ndim > 0xFF:
            raise CheckpointError(f"Array '{name}' has too many dimensions")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    body = b"".join(chunks)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


class _Reader:
    def __init__(self, data: bytes) -> None:
        self._data = data
        self._pos = 0

    def take(self, size: int) -> bytes:
        end = self._pos + size
        if end > len(self._data):
            raise CheckpointError("Truncated checkpoint container")
        chunk = self._data[self._pos : end]
        self._pos = end
        return chunk

    def unpack(self, fmt: str) -> tuple[int, ...]:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    @property
    def exhausted(self) -> bool:
        return self._pos == len(self._data)


def decode_arrays(data: bytes) -> dict[str, np.ndarray]:
    """Parse a container, verifying the magic and trailing checksum."""

    if len(data) < len(MAGIC) + 8 or not data.startswith(MAGIC):
        raise CheckpointError("Not a checkpoint container (bad magic)")
    body, trailer = data[:-4], data[-4:]
    (expected,) = struct.unpack("<I", trailer)
    actual = zlib.crc32(body) & 0xFFFFFFFF
    if actual != expected:
        raise CheckpointError(
            f"Checksum mismatch: stored {expected:#010x}, computed {actual:#010x}"
        )

    reader = _Reader(body)
    reader.take(len(MAGIC))
    (count,) = reader.unpack("<I")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        try:
            name = reader.take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError("Array name is not valid UTF-8") from exc
        (rank,) = reader.unpack("<B")
        dims = reader.unpack(f"<{rank}I")
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = reader.take(4 * size)
        if name in arrays:
            raise CheckpointError(f"Duplicate array name '{name}'")
        arrays[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    if not reader.exhausted:
        raise CheckpointError("Trailing bytes after the declared arrays")
    return arrays


def save_arrays(path: Path, arrays: Mapping[str, np.ndarray]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_arrays(arrays))


def load_arrays(path: Path) -> dict[str, np.ndarray]:
    if not path.exists():
        raise CheckpointError(f"Checkpoint container not found: {path}")
    return decode_arrays(path.read_bytes())


@dataclass(slots=True)
class CheckpointManifest:
    """Named arrays plus everything needed to resume or reuse a run."""

    kind: str
    arrays: dict[str, np.ndarray]
    config: dict[str, Any] = field(default_factory=dict)
    flavor: str | None = None
    step: int = 0
    epoch: int = 0
    rng_state: dict[str, Any] = field(default_factory=dict)
    version: int = MANIFEST_VERSION

    def select(self, prefix: str) -> dict[str, np.ndarray]:
        """Arrays under ``prefix`` with the prefix stripped."""

        return {
            name[len(prefix) :]: value
            for name, value in self.arrays.items()
            if name.startswith(prefix)
        }


def save_checkpoint(directory: Path, manifest: CheckpointManifest) -> Path:
    """Write ``manifest`` to ``directory``, replacing it only once fully written.

    A crash part-way through leaves any previous checkpoint at ``directory``
    untouched.
    """

    if manifest.kind not in CHECKPOINT_KINDS:
        raise CheckpointError(f"Unknown checkpoint kind '{manifest.kind}'")
    directory = directory.expanduser()
    staging = directory.with_name(directory.name + ".partial")
    if staging.exists():
        shutil.rmtree(staging)
    staging.mkdir(parents=True)
    save_arrays(staging / ARRAYS_FILENAME, manifest.arrays)
    meta = {
        "version": manifest.version,
        "kind": manifest.kind,
        "flavor": manifest.flavor,
        "step": manifest.step,
        "epoch": manifest.epoch,
        "rng_state": manifest.rng_state,
        "config": manifest.config,
        "arrays": list(manifest.arrays),
    }
    (staging / MANIFEST_FILENAME).write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    if directory.exists():
        shutil.rmtree(directory)
    staging.rename(directory)
    logger.debug(
        "saved %s checkpoint step %d to %s", manifest.kind, manifest.step, directory
    )
    return directory


def load_checkpoint(directory: Path, *, kind: str | None = None) -> CheckpointManifest:
    directory = directory.expanduser()
    meta_path = directory / MANIFEST_FILENAME
    if not meta_path.exists():
        raise CheckpointError(f"Checkpoint manifest not found: {meta_path}")
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"Malformed checkpoint manifest: {exc}") from exc
    if meta.get("version") != MANIFEST_VERSION:
        raise CheckpointError(
            f"Unsupported checkpoint version {meta.get('version')!r} in {meta_path}"
        )
    if kind is not None and meta.get("kind") != kind:
        raise CheckpointError(
            f"Expected a '{kind}' checkpoint, found '{meta.get('kind')}' at {directory}"
        )
    arrays = load_arrays(directory / ARRAYS_FILENAME)
    listed = meta.get("arrays")
    if listed is not None and sorted(listed) != sorted(arrays):
        raise CheckpointError(f"Manifest and container disagree at {directory}")
    return CheckpointManifest(
        kind=meta["kind"],
        arrays=arrays,
        config=dict(meta.get("config", {})),
        flavor=meta.get("flavor"),
        step=int(meta.get("step", 0)),
        epoch=int(meta.get("epoch", 0)),
        rng_state=dict(meta.get("rng_state", {})),
        version=meta["version"],
    )


__all__ = [
    "ARRAYS_FILENAME",
    "CHECKPOINT_KINDS",
    "CheckpointError",
    "CheckpointManifest",
    "MAGIC",
    "MANIFEST_FILENAME",
    "decode_arrays",
    "encode_arrays",
    "load_arrays",
    "load_checkpoint",
    "save_arrays",
    "save_checkpoint",
]
