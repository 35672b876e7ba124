"""Embedding dataset types and the binary on-disk format.

The file layout (little-endian) is the interchange contract with external
feature extractors:

    magic "PTPS" | u32 version=1 | u32 d | u64 n_records | u32 n_classes
    per class:  u32 class_id | u16 name_len | UTF-8 name | d x f32 token
    per record: u32 class_id | u32 domain_id | u8 split (0=train,1=test) | d x f32 vector

Vectors are stored at 32-bit precision and promoted to float64 (and
renormalized) on load.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, MissingTokenError, ShapeError

MAGIC = b"PTPS"
VERSION = 1

SPLIT_TRAIN = "train"
SPLIT_TEST = "test"
_SPLIT_CODE = {SPLIT_TRAIN: 0, SPLIT_TEST: 1}
_SPLIT_NAME = {0: SPLIT_TRAIN, 1: SPLIT_TEST}


@dataclass
class EmbeddingRecord:
    """One labeled feature vector: class, domain (e.g. collection year), split."""

    class_id: int
    domain_id: int
    split: str
    vector: np.ndarray  # (d,) float64, unit norm


@dataclass
class ClassTokenTable:
    """Per-class name token embeddings, one unit-norm vector per class."""

    names: dict[int, str] = field(default_factory=dict)
    tokens: dict[int, np.ndarray] = field(default_factory=dict)

    def add(self, class_id, name, token):
        self.names[int(class_id)] = name
        self.tokens[int(class_id)] = np.asarray(token, dtype=np.float64)

    def token(self, class_id):
        try:
            return self.tokens[class_id]
        except KeyError:
            raise MissingTokenError(f"no name token for class id {class_id}") from None

    def name(self, class_id):
        return self.names.get(class_id, str(class_id))

    def class_ids(self):
        return sorted(self.tokens)

    def merged_with(self, other):
        out = ClassTokenTable(dict(self.names), dict(self.tokens))
        out.names.update(other.names)
        out.tokens.update(other.tokens)
        return out

    @property
    def d(self):
        for t in self.tokens.values():
            return t.size
        return 0


@dataclass
class Task:
    """One training task: the classes it introduces and its labeled records."""

    task_id: int
    new_class_ids: list[int]
    domain_ids: list[int]
    train: list[EmbeddingRecord]
    test: list[EmbeddingRecord]


@dataclass
class TaskStream:
    """An ordered sequence of tasks plus the shared class-name token table."""

    tasks: list[Task]
    tokens: ClassTokenTable
    d: int
    mode: str

    def all_records(self):
        out = []
        for t in self.tasks:
            out.extend(t.train)
            out.extend(t.test)
        return out


def _renormalized(vec, what, offset):
    v = np.asarray(vec, dtype=np.float64)
    n = float(np.linalg.norm(v))
    if n <= 1e-12:
        raise FormatError(f"zero-norm {what}", offset=offset)
    return v / n


def write_dataset(records, token_table, path):
    """Write records and the class token table to `path` in PTPS format."""
    dims = {t.size for t in token_table.tokens.values()}
    dims.update(r.vector.size for r in records)
    if len(dims) > 1:
        raise ShapeError(f"inconsistent vector dimensions in dataset: {sorted(dims)}")
    d = dims.pop() if dims else 0

    class_ids = token_table.class_ids()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IIQI", VERSION, d, len(records), len(class_ids)))
        for cid in class_ids:
            name = token_table.names.get(cid, str(cid)).encode("utf-8")
            fh.write(struct.pack("<IH", cid, len(name)))
            fh.write(name)
            fh.write(np.asarray(token_table.tokens[cid], dtype="<f4").tobytes())
        for r in records:
            if r.split not in _SPLIT_CODE:
                raise ShapeError(f"unknown split {r.split!r}")
            fh.write(struct.pack("<IIB", r.class_id, r.domain_id, _SPLIT_CODE[r.split]))
            fh.write(np.asarray(r.vector, dtype="<f4").tobytes())


class _Reader:
    """Cursor over a byte buffer that raises FormatError with the offset."""

    def __init__(self, data):
        self.data = data
        self.off = 0

    def take(self, n, what):
        if self.off + n > len(self.data):
            raise FormatError(f"truncated file while reading {what}", offset=self.off)
        chunk = self.data[self.off : self.off + n]
        self.off += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_dataset(path):
    """Read a PTPS file; returns (records, token_table).

    Vectors are promoted to float64 and renormalized to unit norm.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data)

    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    d, n_records, n_classes = r.unpack("<IQI", "header")

    tokens = ClassTokenTable()
    for _ in range(n_classes):
        cid, name_len = r.unpack("<IH", "class entry")
        name = r.take(name_len, "class name").decode("utf-8")
        tok_off = r.off
        tok = np.frombuffer(r.take(4 * d, "class token"), dtype="<f4")
        tokens.add(cid, name, _renormalized(tok, "class token", tok_off))

    records = []
    for _ in range(n_records):
        cid, dom, split = r.unpack("<IIB", "record header")
        if split not in _SPLIT_NAME:
            raise FormatError(f"invalid split code {split}", offset=r.off - 1)
        if cid not in tokens.tokens:
            raise FormatError(f"record references unknown class id {cid}", offset=r.off - 9)
        vec_off = r.off
        vec = np.frombuffer(r.take(4 * d, "record vector"), dtype="<f4")
        records.append(
            EmbeddingRecord(cid, dom, _SPLIT_NAME[split], _renormalized(vec, "record vector", vec_off))
        )

    if r.off != len(data):
        raise FormatError(f"{len(data) - r.off} trailing bytes after last record", offset=r.off)
    return records, tokens


def stream_from_records(records, tokens, mode, classes_per_task=None):
    """Group a flat record list into a TaskStream.

    ci/cdc: classes sorted ascending are chunked into tasks of
    `classes_per_task`; every record of a class belongs to its class's task.
    cdi: domain ids sorted ascending become tasks; a class is "new" in the
    first domain it appears in.
    """
    mode = mode.lower()
    d = tokens.d
    if mode in ("ci", "cdc"):
        if not classes_per_task or classes_per_task < 1:
            raise ShapeError("classes_per_task is required to regroup a ci/cdc dataset")
        class_ids = sorted({r.class_id for r in records})
        by_class = {c: [] for c in class_ids}
        for r in records:
            by_class[r.class_id].append(r)
        tasks = []
        for t, start in enumerate(range(0, len(class_ids), classes_per_task)):
            chunk = class_ids[start : start + classes_per_task]
            recs = [r for c in chunk for r in by_class[c]]
            tasks.append(
                Task(
                    task_id=t,
                    new_class_ids=list(chunk),
                    domain_ids=sorted({r.domain_id for r in recs}),
                    train=[r for r in recs if r.split == SPLIT_TRAIN],
                    test=[r for r in recs if r.split == SPLIT_TEST],
                )
            )
        return TaskStream(tasks=tasks, tokens=tokens, d=d, mode=mode)

    if mode == "cdi":
        domains = sorted({r.domain_id for r in records})
        first_domain = {}
        for r in records:
            cur = first_domain.get(r.class_id)
            if cur is None or r.domain_id < cur:
                first_domain[r.class_id] = r.domain_id
        tasks = []
        for t, dom in enumerate(domains):
            recs = [r for r in records if r.domain_id == dom]
            new_ids = sorted({c for c, fd in first_domain.items() if fd == dom})
            tasks.append(
                Task(
                    task_id=t,
                    new_class_ids=new_ids,
                    domain_ids=[dom],
                    train=[r for r in recs if r.split == SPLIT_TRAIN],
                    test=[r for r in recs if r.split == SPLIT_TEST],
                )
            )
        return TaskStream(tasks=tasks, tokens=tokens, d=d, mode=mode)

    raise ShapeError(f"unknown stream mode {mode!r}")
