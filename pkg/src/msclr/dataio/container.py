"""On-disk dataset layout.

A dataset directory holds ``manifest.json`` plus one ``.mskl`` file per
(record, format). Sequence files are little-endian::

    b"MSKL" | u32 version=1 | u32 C | u32 V | u32 T | u32 P
    | u16 name length | UTF-8 convention name | C*V*T*P float32

Floats are stored in C-order of a ``(C, V, T, P)`` array, so the person
index varies fastest.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ..conventions import ConventionRegistry

MAGIC = b"MSKL"
VERSION = 1
MANIFEST_NAME = "manifest.json"
_HEADER = struct.Struct("<4sIIIII")
_NAME_LEN = struct.Struct("<H")


class DatasetError(Exception):
    """Base class for dataset I/O failures."""


class MalformedHeaderError(DatasetError):
    pass


class TruncatedFileError(DatasetError):
    pass


class DimensionMismatchError(DatasetError):
    pass


class UnknownFormatError(DatasetError):
    pass


class MissingFileError(DatasetError, FileNotFoundError):
    pass


@dataclass
class SequenceRecord:
    sample_id: str
    formats: dict[str, np.ndarray]
    label: int
    split_tag: str = "train"

    def __post_init__(self) -> None:
        if not self.formats:
            raise ValueError(f"record {self.sample_id!r} has no formats")
        shapes = {(a.shape[2], a.shape[3]) for a in self.formats.values()}
        if len(shapes) != 1:
            raise DimensionMismatchError(
                f"record {self.sample_id!r}: formats disagree on (T, P): {sorted(shapes)}")

    @property
    def frames(self) -> int:
        return next(iter(self.formats.values())).shape[2]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SequenceRecord):
            return NotImplemented
        return (self.sample_id == other.sample_id and self.label == other.label
                and self.split_tag == other.split_tag
                and self.formats.keys() == other.formats.keys()
                and all(np.array_equal(self.formats[k], other.formats[k]) for k in self.formats))


def write_sequence(path: str | Path, data: np.ndarray, convention: str) -> None:
    data = np.asarray(data)
    if data.ndim != 4:
        raise DimensionMismatchError(f"expected (C, V, T, P) array, got shape {data.shape}")
    name = convention.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, *data.shape))
        fh.write(_NAME_LEN.pack(len(name)))
        fh.write(name)
        fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def read_sequence(path: str | Path) -> tuple[str, np.ndarray]:
    """Return ``(convention_name, array)`` from a sequence file."""
    try:
        blob = Path(path).read_bytes()
    except FileNotFoundError:
        raise MissingFileError(f"{path}: file not found") from None
    if len(blob) < _HEADER.size + _NAME_LEN.size:
        if len(blob) >= 4 and blob[:4] != MAGIC:
            raise MalformedHeaderError(f"{path}: bad magic bytes {blob[:4]!r}")
        raise TruncatedFileError(f"{path}: {len(blob)} bytes is shorter than the header")
    magic, version, c, v, t, p = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise MalformedHeaderError(f"{path}: bad magic bytes {magic!r}")
    if version != VERSION:
        raise MalformedHeaderError(f"{path}: unsupported version {version}")
    if min(c, v, t, p) == 0:
        raise MalformedHeaderError(f"{path}: zero-sized dimension in {(c, v, t, p)}")
    offset = _HEADER.size
    (name_len,) = _NAME_LEN.unpack_from(blob, offset)
    offset += _NAME_LEN.size
    if len(blob) < offset + name_len:
        raise TruncatedFileError(f"{path}: truncated convention name")
    try:
        name = blob[offset:offset + name_len].decode("utf-8")
    except UnicodeDecodeError:
        raise MalformedHeaderError(f"{path}: convention name is not UTF-8") from None
    offset += name_len
    count = c * v * t * p
    if len(blob) - offset < 4 * count:
        raise TruncatedFileError(
            f"{path}: expected {4 * count} payload bytes, found {len(blob) - offset}")
    if len(blob) - offset > 4 * count:
        raise DimensionMismatchError(f"{path}: {len(blob) - offset - 4 * count} trailing bytes")
    data = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(c, v, t, p)
    return name, data.astype(np.float32)


def write_dataset(records: Iterable[SequenceRecord], directory: str | Path) -> Path:
    directory = Path(directory)
    (directory / "sequences").mkdir(parents=True, exist_ok=True)
    entries = []
    for rec in records:
        paths = {}
        for fmt, arr in rec.formats.items():
            rel = f"sequences/{rec.sample_id}.{fmt}.mskl"
            write_sequence(directory / rel, arr, fmt)
            paths[fmt] = rel
        entries.append({"sample_id": rec.sample_id, "label": int(rec.label),
                        "split": rec.split_tag, "formats": paths})
    manifest = {"version": VERSION, "record_count": len(entries), "records": entries}
    path = directory / MANIFEST_NAME
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
    os.replace(tmp, path)
    return path


def _manifest_path(path: str | Path) -> Path:
    path = Path(path)
    return path / MANIFEST_NAME if path.is_dir() else path


def read_manifest(manifest_path: str | Path) -> dict:
    path = _manifest_path(manifest_path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise MissingFileError(f"{path}: manifest not found") from None
    except json.JSONDecodeError as exc:
        raise MalformedHeaderError(f"{path}: manifest is not valid JSON: {exc}") from None
    if not isinstance(doc, dict) or "records" not in doc:
        raise MalformedHeaderError(f"{path}: manifest has no 'records' list")
    if doc.get("record_count", len(doc["records"])) != len(doc["records"]):
        raise MalformedHeaderError(f"{path}: record_count does not match listed records")
    return doc


def read_dataset(manifest_path: str | Path, registry: ConventionRegistry | None = None,
                 formats: Sequence[str] | None = None) -> list[SequenceRecord]:
    """Load every record listed in a manifest.

    ``formats`` restricts which per-format files are read. With a registry,
    unknown convention names and joint-count mismatches are rejected.
    """
    path = _manifest_path(manifest_path)
    doc = read_manifest(path)
    root = path.parent
    records = []
    for entry in doc["records"]:
        sid = entry["sample_id"]
        arrays = {}
        for fmt, rel in entry["formats"].items():
            if formats is not None and fmt not in formats:
                continue
            name, arr = read_sequence(root / rel)
            if name != fmt:
                raise DimensionMismatchError(
                    f"{root / rel}: file holds {name!r} but manifest says {fmt!r}")
            if registry is not None:
                if fmt not in registry:
                    raise UnknownFormatError(f"{root / rel}: unknown convention {fmt!r}")
                if arr.shape[1] != registry[fmt].joint_count:
                    raise DimensionMismatchError(
                        f"{root / rel}: {arr.shape[1]} joints, {fmt} has {registry[fmt].joint_count}")
            arrays[fmt] = arr
        if not arrays:
            raise UnknownFormatError(f"record {sid!r} has none of the requested formats")
        records.append(SequenceRecord(sid, arrays, int(entry["label"]), entry.get("split", "train")))
    return records


@dataclass
class Finding:
    where: str
    problem: str

    def __str__(self) -> str:
        return f"{self.where}: {self.problem}"


def check_dataset(manifest_path: str | Path, registry: ConventionRegistry,
                  formats: Sequence[str] = ()) -> list[Finding]:
    """Collect every consistency problem without raising."""
    path = _manifest_path(manifest_path)
    try:
        doc = read_manifest(path)
    except DatasetError as exc:
        return [Finding(str(path), str(exc))]
    findings: list[Finding] = []
    root = path.parent
    for entry in doc["records"]:
        sid = entry.get("sample_id", "<missing id>")
        for key in ("label", "formats"):
            if key not in entry:
                findings.append(Finding(f"record {sid}", f"missing field {key!r}"))
        entry_formats = entry.get("formats", {})
        for fmt in formats:
            if fmt not in entry_formats:
                findings.append(Finding(f"record {sid}", f"format {fmt!r} missing"))
        frames = set()
        for fmt, rel in entry_formats.items():
            if fmt not in registry:
                findings.append(Finding(f"record {sid}", f"unknown convention {fmt!r}"))
                continue
            try:
                name, arr = read_sequence(root / rel)
            except DatasetError as exc:
                findings.append(Finding(f"record {sid} file {rel}", str(exc)))
                continue
            if name != fmt:
                findings.append(Finding(f"record {sid} file {rel}", f"holds {name!r}, manifest says {fmt!r}"))
            if arr.shape[1] != registry[fmt].joint_count:
                findings.append(Finding(f"record {sid} file {rel}",
                                        f"{arr.shape[1]} joints, {fmt} has {registry[fmt].joint_count}"))
            if not np.all(np.isfinite(arr)):
                findings.append(Finding(f"record {sid} file {rel}", "non-finite values"))
            frames.add((arr.shape[2], arr.shape[3]))
        if len(frames) > 1:
            findings.append(Finding(f"record {sid}", f"formats disagree on (T, P): {sorted(frames)}"))
    return findings
