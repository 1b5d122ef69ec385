"""Persist and load paired-case datasets in a portable, bit-exact layout.

On-disk format:
  * one raw array file per volume/mask with a 16-byte little-endian header
    ``<2sH3I`` = (magic b"CP", dtype code, D, H, W) followed by C-order voxel
    data (dtype 1 = float32 LE, dtype 2 = uint8);
  * one UTF-8 ``manifest.json`` listing cases, split assignments, extents,
    spacings, and a CRC32 checksum per array file.

Load order follows manifest order and is deterministic across platforms.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from .core_types import PairedCase, Phase, SegMask, Volume3D

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1
_MAGIC = b"CP"
_HEADER = struct.Struct("<2sH3I")
_DTYPE_FLOAT32 = 1
_DTYPE_UINT8 = 2
_SPLITS = ("train", "val", "test")


class DatasetIOError(ValueError):
    """Raised when a dataset cannot be written or fails validation on load."""


@dataclass(frozen=True)
class ManifestEntry:
    case_id: str
    label: int
    nct_path: str
    ctpa_path: str
    mask_path: str
    extent: tuple[int, int, int]
    nct_spacing: tuple[float, float, float]
    ctpa_spacing: tuple[float, float, float]
    checksums: dict[str, int]


@dataclass(frozen=True)
class DatasetManifest:
    version: int
    cases: tuple[ManifestEntry, ...]
    split: dict[str, str]


def write_array(path: Path, arr: np.ndarray) -> int:
    """Write one raw array file; returns the CRC32 of the full file contents."""
    if arr.ndim != 3:
        raise DatasetIOError(f"arrays must be 3D, got shape {arr.shape}")
    if arr.dtype == np.float32:
        code = _DTYPE_FLOAT32
        payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    elif arr.dtype == np.uint8:
        code = _DTYPE_UINT8
        payload = np.ascontiguousarray(arr).tobytes()
    else:
        raise DatasetIOError(f"unsupported array dtype {arr.dtype}")
    blob = _HEADER.pack(_MAGIC, code, *arr.shape) + payload
    path.write_bytes(blob)
    return zlib.crc32(blob)


def read_array(path: Path) -> np.ndarray:
    blob = path.read_bytes()
    if len(blob) < _HEADER.size:
        raise DatasetIOError(f"{path}: truncated header")
    magic, code, d, h, w = _HEADER.unpack_from(blob)
    if magic != _MAGIC:
        raise DatasetIOError(f"{path}: bad magic {magic!r}")
    if code == _DTYPE_FLOAT32:
        dtype = np.dtype("<f4")
    elif code == _DTYPE_UINT8:
        dtype = np.dtype(np.uint8)
    else:
        raise DatasetIOError(f"{path}: unknown dtype code {code}")
    expected = _HEADER.size + d * h * w * dtype.itemsize
    if len(blob) != expected:
        raise DatasetIOError(f"{path}: expected {expected} bytes, found {len(blob)}")
    data = np.frombuffer(blob, dtype=dtype, offset=_HEADER.size).reshape(d, h, w)
    return np.ascontiguousarray(data.astype(dtype.newbyteorder("=")))


def _file_crc(path: Path) -> int:
    return zlib.crc32(path.read_bytes())


def save_dataset(
    cases: Sequence[PairedCase], splits: Mapping[str, str], directory: str | Path
) -> DatasetManifest:
    """Write all cases plus a manifest into ``directory``.

    Rejects duplicate case ids and malformed split maps before touching disk;
    on a mid-write failure every file written so far is removed.
    """
    directory = Path(directory)
    ids = [c.case_id for c in cases]
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise DatasetIOError(f"duplicate case_id(s): {dupes}")
    if set(splits.keys()) != set(ids):
        raise DatasetIOError("split map must cover every case_id exactly once")
    bad = {v for v in splits.values() if v not in _SPLITS}
    if bad:
        raise DatasetIOError(f"unknown split name(s): {sorted(bad)}; expected one of {_SPLITS}")

    directory.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    entries: list[ManifestEntry] = []
    try:
        for case in cases:
            paths = {
                "nct": f"{case.case_id}.nct.raw",
                "ctpa": f"{case.case_id}.ctpa.raw",
                "mask": f"{case.case_id}.mask.raw",
            }
            crcs = {}
            for key, arr in (
                ("nct", case.nct.data),
                ("ctpa", case.ctpa.data),
                ("mask", case.mask.labels),
            ):
                target = directory / paths[key]
                crcs[key] = write_array(target, arr)
                written.append(target)
            entries.append(
                ManifestEntry(
                    case_id=case.case_id,
                    label=int(case.label),
                    nct_path=paths["nct"],
                    ctpa_path=paths["ctpa"],
                    mask_path=paths["mask"],
                    extent=case.nct.extent,
                    nct_spacing=case.nct.spacing,
                    ctpa_spacing=case.ctpa.spacing,
                    checksums=crcs,
                )
            )
        manifest = DatasetManifest(
            version=MANIFEST_VERSION,
            cases=tuple(entries),
            split={c.case_id: splits[c.case_id] for c in cases},
        )
        manifest_path = directory / MANIFEST_NAME
        manifest_path.write_text(_manifest_to_json(manifest), encoding="utf-8")
        written.append(manifest_path)
    except Exception:
        for path in written:
            try:
                os.unlink(path)
            except OSError:
                pass
        raise
    return manifest


def _manifest_to_json(manifest: DatasetManifest) -> str:
    doc = {
        "version": manifest.version,
        "cases": [
            {
                "case_id": e.case_id,
                "label": e.label,
                "nct": e.nct_path,
                "ctpa": e.ctpa_path,
                "mask": e.mask_path,
                "extent": list(e.extent),
                "spacing": {"nct": list(e.nct_spacing), "ctpa": list(e.ctpa_spacing)},
                "crc32": e.checksums,
            }
            for e in manifest.cases
        ],
        "split": manifest.split,
    }
    return json.dumps(doc, indent=2) + "\n"


def _manifest_from_json(text: str) -> DatasetManifest:
    doc = json.loads(text)
    if doc.get("version") != MANIFEST_VERSION:
        raise DatasetIOError(f"unsupported manifest version {doc.get('version')!r}")
    entries = []
    for item in doc["cases"]:
        entries.append(
            ManifestEntry(
                case_id=item["case_id"],
                label=int(item["label"]),
                nct_path=item["nct"],
                ctpa_path=item["ctpa"],
                mask_path=item["mask"],
                extent=tuple(int(x) for x in item["extent"]),
                nct_spacing=tuple(float(x) for x in item["spacing"]["nct"]),
                ctpa_spacing=tuple(float(x) for x in item["spacing"]["ctpa"]),
                checksums={k: int(v) for k, v in item["crc32"].items()},
            )
        )
    return DatasetManifest(version=doc["version"], cases=tuple(entries), split=dict(doc["split"]))


def load_manifest(directory: str | Path) -> DatasetManifest:
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.is_file():
        raise DatasetIOError(f"no {MANIFEST_NAME} in {directory}")
    manifest = _manifest_from_json(manifest_path.read_text(encoding="utf-8"))
    ids = [e.case_id for e in manifest.cases]
    if set(manifest.split.keys()) != set(ids):
        raise DatasetIOError("manifest split map does not cover every case exactly once")
    for entry in manifest.cases:
        for label, rel in (("nct", entry.nct_path), ("ctpa", entry.ctpa_path), ("mask", entry.mask_path)):
            if not (directory / rel).is_file():
                raise DatasetIOError(f"case '{entry.case_id}': missing {label} file {rel}")
    return manifest


def _load_case(directory: Path, entry: ManifestEntry) -> PairedCase:
    arrays = {}
    for key, rel in (("nct", entry.nct_path), ("ctpa", entry.ctpa_path), ("mask", entry.mask_path)):
        path = directory / rel
        crc = _file_crc(path)
        if crc != entry.checksums[key]:
            raise DatasetIOError(f"case '{entry.case_id}': checksum mismatch for {rel}")
        arr = read_array(path)
        if tuple(arr.shape) != entry.extent:
            raise DatasetIOError(
                f"case '{entry.case_id}': extent mismatch for {rel}: "
                f"file {tuple(arr.shape)} vs manifest {entry.extent}"
            )
        arrays[key] = arr
    return PairedCase(
        nct=Volume3D(arrays["nct"], spacing=entry.nct_spacing, phase=Phase.NCT),
        ctpa=Volume3D(arrays["ctpa"], spacing=entry.ctpa_spacing, phase=Phase.CTPA),
        mask=SegMask(arrays["mask"]),
        label=entry.label,
        case_id=entry.case_id,
    )


def load_dataset(directory: str | Path) -> tuple[DatasetManifest, Iterator[PairedCase]]:
    """Validate the manifest and return it plus a lazy case iterator in manifest order."""
    directory = Path(directory)
    manifest = load_manifest(directory)

    def _iter() -> Iterator[PairedCase]:
        for entry in manifest.cases:
            yield _load_case(directory, entry)

    return manifest, _iter()
