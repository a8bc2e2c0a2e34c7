"""On-disk formats for skeleton samples and dataset manifests.

Sample file (little-endian)::

    b"SKEL" | u32 version=1 | u32 C | u32 T | u32 V | u32 M
    | C*T*V*M float32, C-major | [u32 label]

The trailing label is present only for labelled samples; 0xFFFFFFFF also
reads back as "no label". Manifests are UTF-8 text with one
``path<TAB>label<TAB>subject<TAB>view`` record per line, paths relative to the
manifest's directory.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError
from .skeleton import SkeletonSequence, normalize_origin

MAGIC = b"SKEL"
VERSION = 1
NO_LABEL = 0xFFFFFFFF
_HEADER = struct.Struct("<4s5I")
_LABEL = struct.Struct("<I")
MANIFEST_NAME = "manifest.tsv"


def encode_sample(seq: SkeletonSequence) -> bytes:
    C, T, V, M = seq.shape
    parts = [_HEADER.pack(MAGIC, VERSION, C, T, V, M),
             np.ascontiguousarray(seq.values, dtype="<f4").tobytes()]
    if seq.label is not None:
        parts.append(_LABEL.pack(seq.label))
    return b"".join(parts)


def decode_sample(data: bytes, graph_id: str = "ntu25") -> SkeletonSequence:
    if len(data) < _HEADER.size:
        raise FormatError("truncated sample header")
    magic, version, C, T, V, M = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported sample version {version}")
    if C not in (2, 3) or min(T, V, M) < 1:
        raise FormatError(f"invalid dims C={C} T={T} V={V} M={M}")
    n_bytes = 4 * C * T * V * M
    body = data[_HEADER.size:]
    if len(body) < n_bytes:
        raise FormatError(f"truncated payload: {len(body)} of {n_bytes} bytes")
    tail = body[n_bytes:]
    if len(tail) == 0:
        label = None
    elif len(tail) == _LABEL.size:
        (label,) = _LABEL.unpack(tail)
        label = None if label == NO_LABEL else int(label)
    else:
        raise FormatError(f"{len(tail)} unexpected trailing bytes")
    values = np.frombuffer(body[:n_bytes], dtype="<f4").reshape(C, T, V, M)
    if not np.isfinite(values).all():
        raise FormatError("sample contains non-finite values")
    return SkeletonSequence(values.astype(np.float32), label, graph_id)


def save_sample(path, seq: SkeletonSequence) -> None:
    Path(path).write_bytes(encode_sample(seq))


def load_sample(path, graph_id: str = "ntu25", expect: tuple[int, int] | None = None) -> SkeletonSequence:
    """Read one sample; ``expect=(C, V)`` enforces manifest dimensions."""
    seq = decode_sample(Path(path).read_bytes(), graph_id)
    if expect is not None and (seq.shape[0], seq.shape[2]) != tuple(expect):
        raise FormatError(
            f"{path}: dims (C={seq.shape[0]}, V={seq.shape[2]}) do not match manifest {tuple(expect)}")
    return seq


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: int
    subject: int
    view: int


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]
    joint_count: int
    coordinate_dim: int
    root: Path = Path(".")

    def __len__(self):
        return len(self.entries)


def write_manifest(directory, entries) -> Path:
    path = Path(directory) / MANIFEST_NAME
    lines = [f"{e.path}\t{e.label}\t{e.subject}\t{e.view}\n" for e in entries]
    path.write_text("".join(lines), encoding="utf-8")
    return path


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    entries = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 4:
            raise FormatError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(fields)}")
        try:
            entries.append(ManifestEntry(fields[0], int(fields[1]), int(fields[2]), int(fields[3])))
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
    if not entries:
        raise FormatError(f"{path}: empty manifest")
    with open(path.parent / entries[0].path, "rb") as fh:
        head = fh.read(_HEADER.size)
    if len(head) < _HEADER.size:
        raise FormatError(f"{entries[0].path}: truncated sample header")
    _, _, C, _, V, _ = _HEADER.unpack(head)
    return DatasetManifest(tuple(entries), V, C, path.parent)


@dataclass
class SkeletonDataset:
    """Samples held in memory together with their manifest metadata."""

    samples: list[SkeletonSequence]
    labels: np.ndarray
    subjects: np.ndarray
    views: np.ndarray
    name: str = "dataset"

    def __len__(self):
        return len(self.samples)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1

    def subset(self, indices, name: str | None = None) -> "SkeletonDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return SkeletonDataset(
            [self.samples[i] for i in indices], self.labels[indices],
            self.subjects[indices], self.views[indices], name or self.name)

    def split_by_subject(self, test_subjects) -> tuple["SkeletonDataset", "SkeletonDataset"]:
        test = np.isin(self.subjects, list(test_subjects))
        return (self.subset(np.flatnonzero(~test), f"{self.name}/train"),
                self.subset(np.flatnonzero(test), f"{self.name}/test"))


def load_dataset(path, graph_id: str = "ntu25", normalize: bool = True, root_joint: int = 0) -> SkeletonDataset:
    manifest = read_manifest(path)
    expect = (manifest.coordinate_dim, manifest.joint_count)
    samples = []
    for e in manifest.entries:
        seq = load_sample(manifest.root / e.path, graph_id, expect)
        if normalize:
            seq = seq.replace(normalize_origin(seq.values, root_joint))
        samples.append(SkeletonSequence(seq.values, e.label, graph_id))
    return SkeletonDataset(
        samples,
        np.array([e.label for e in manifest.entries], dtype=np.int64),
        np.array([e.subject for e in manifest.entries], dtype=np.int64),
        np.array([e.view for e in manifest.entries], dtype=np.int64),
        name=os.path.basename(os.path.normpath(manifest.root)),
    )


def save_dataset(directory, dataset: SkeletonDataset) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, seq in enumerate(dataset.samples):
        name = f"s{i:06d}.skel"
        save_sample(directory / name, seq)
        entries.append(ManifestEntry(name, int(dataset.labels[i]),
                                     int(dataset.subjects[i]), int(dataset.views[i])))
    return write_manifest(directory, entries)
