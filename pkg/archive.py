"""
Archive Storage
Directory archives of named arrays: a JSON manifest plus one raw little-endian file per array

Used for simulation sets, posterior samples and model checkpoints.
"""

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np

from errors import ArchiveChecksumError, ArchiveError, ArchiveVersionError

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.json"

_DTYPES = {"f": "<f8", "i": "<i8", "u": "<i8", "b": "|u1"}


@dataclass(eq=False)
class SimulationArchive:
    """Named arrays plus the manifest fields describing them"""
    arrays: Dict[str, np.ndarray]
    kind: str = "simulations"
    task: Optional[str] = None
    budget: Optional[int] = None
    seed: Optional[int] = None
    meta: Dict[str, Any] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _storage_dtype(name: str, array: np.ndarray) -> str:
    code = _DTYPES.get(array.dtype.kind)
    if code is None:
        raise ArchiveError(f"array '{name}' has unsupported dtype {array.dtype}")
    return code


def write_archive(path: str, archive: SimulationArchive) -> Path:
    """
    Write every array and then the manifest

    Args:
        path: target directory (created if missing)
        archive: arrays and metadata

    Returns:
        Path of the archive directory
    """
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name in sorted(archive.arrays):
        array = np.asarray(archive.arrays[name])
        dtype = _storage_dtype(name, array)
        data = np.ascontiguousarray(array, dtype=np.dtype(dtype))
        filename = f"{name}.bin"
        (root / filename).write_bytes(data.tobytes(order="C"))
        entries[name] = {
            "file": filename,
            "shape": list(data.shape),
            "dtype": dtype,
            "endianness": "little",
            "nbytes": int(data.nbytes),
            "sha256": _sha256(root / filename),
        }
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "kind": archive.kind,
        "task": archive.task,
        "budget": archive.budget,
        "seed": archive.seed,
        "meta": archive.meta,
        "arrays": entries,
    }
    (root / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    logger.info(f"Wrote {archive.kind} archive with {len(entries)} array(s) to {root}")
    return root


def read_manifest(path: str) -> Dict[str, Any]:
    manifest_path = Path(path) / MANIFEST_NAME
    if not manifest_path.exists():
        raise ArchiveError(f"no manifest at {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise ArchiveError(f"malformed manifest {manifest_path}: {e}") from e
    version = manifest.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ArchiveVersionError(f"archive schema version {version!r} is not supported (expected {SCHEMA_VERSION})")
    return manifest


def read_archive(path: str, mmap: bool = False) -> SimulationArchive:
    """
    Read and verify an archive

    Raises:
        ArchiveVersionError: unknown schema version
        ArchiveChecksumError: missing, truncated or altered array file
    """
    root = Path(path)
    manifest = read_manifest(path)
    arrays = {}
    for name, entry in manifest.get("arrays", {}).items():
        file_path = root / entry["file"]
        if not file_path.exists():
            raise ArchiveChecksumError(name, f"missing file {entry['file']}")
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        actual = file_path.stat().st_size
        if actual != expected:
            raise ArchiveChecksumError(name, f"file holds {actual} bytes, manifest implies {expected}")
        if _sha256(file_path) != entry["sha256"]:
            raise ArchiveChecksumError(name, "sha256 mismatch")
        if mmap and expected > 0:
            arrays[name] = np.memmap(file_path, dtype=dtype, mode="r", shape=shape)
        else:
            arrays[name] = np.fromfile(file_path, dtype=dtype).reshape(shape)
    logger.debug(f"Read {manifest.get('kind')} archive from {root}")
    return SimulationArchive(
        arrays=arrays,
        kind=manifest.get("kind", "simulations"),
        task=manifest.get("task"),
        budget=manifest.get("budget"),
        seed=manifest.get("seed"),
        meta=manifest.get("meta", {}),
    )


def archive_exists(path: str) -> bool:
    return (Path(path) / MANIFEST_NAME).exists()
