"""Records, vector arithmetic and the text file formats used by every stage.

Vectors are 1-D ``float64`` numpy arrays.  Files are plain UTF-8 text with
LF line endings; reals are written with ``repr`` which is the shortest
string that round-trips the double exactly (at most 17 significant digits).

Embedding file::

    #dim 3
    v0001<TAB>voice<TAB>id07<TAB>0.25 -1.5 3.0
    f0001<TAB>face<TAB>-<TAB>0.5 0.5 0.0

Pair manifest and score files are CSV with headers
``voice_id,face_id,label`` and ``voice_id,face_id,score``.
"""

from __future__ import annotations

import csv
import enum
import io
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import DegenerateInputError, DimensionError, FormatError

PAIR_HEADER = ["voice_id", "face_id", "label"]
SCORE_HEADER = ["voice_id", "face_id", "score"]
NO_IDENTITY = "-"


class Modality(str, enum.Enum):
    VOICE = "voice"
    FACE = "face"


def as_vector(values) -> np.ndarray:
    vec = np.asarray(values, dtype=np.float64)
    if vec.ndim != 1:
        raise DimensionError(f"expected a 1-D vector, got shape {vec.shape}")
    return vec


@dataclass(frozen=True, eq=False)
class EmbeddingRecord:
    """One sample: id, modality, optional identity label and its vector."""

    sample_id: str
    modality: Modality
    identity: str | None
    vector: np.ndarray = field(repr=False)

    def __post_init__(self):
        if not self.sample_id or any(c in self.sample_id for c in "\t\n\r "):
            raise FormatError(f"invalid sample id {self.sample_id!r}")
        object.__setattr__(self, "modality", Modality(self.modality))
        if self.identity is not None and (
            self.identity == NO_IDENTITY or not self.identity or any(c in self.identity for c in "\t\n\r")
        ):
            raise FormatError(f"invalid identity {self.identity!r} for {self.sample_id}")
        vec = np.array(self.vector, dtype=np.float64)
        if vec.ndim != 1 or vec.size < 2:
            raise DimensionError(f"{self.sample_id}: vector must be 1-D with at least 2 components")
        if not np.all(np.isfinite(vec)):
            raise FormatError(f"{self.sample_id}: vector has non-finite components")
        vec.setflags(write=False)
        object.__setattr__(self, "vector", vec)

    @property
    def dim(self) -> int:
        return int(self.vector.size)

    def __eq__(self, other):
        if not isinstance(other, EmbeddingRecord):
            return NotImplemented
        return (
            self.sample_id == other.sample_id
            and self.modality == other.modality
            and self.identity == other.identity
            and self.vector.shape == other.vector.shape
            and bool(np.all(self.vector == other.vector))
        )

    __hash__ = None


class TestPair(NamedTuple):
    __test__ = False  # keep pytest from collecting it

    voice_id: str
    face_id: str
    label: bool | None = None


class ScoreEntry(NamedTuple):
    voice_id: str
    face_id: str
    score: float


@dataclass(frozen=True)
class ScoreSet:
    """Scores in manifest order; lower means a more likely match."""

    entries: tuple[ScoreEntry, ...]

    def __post_init__(self):
        entries = tuple(ScoreEntry(v, f, float(s)) for v, f, s in self.entries)
        for e in entries:
            if not math.isfinite(e.score):
                raise DegenerateInputError(f"non-finite score for pair ({e.voice_id}, {e.face_id})")
        object.__setattr__(self, "entries", entries)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def scores(self) -> np.ndarray:
        return np.array([e.score for e in self.entries], dtype=np.float64)

    def with_scores(self, scores: Sequence[float]) -> "ScoreSet":
        if len(scores) != len(self.entries):
            raise DimensionError("score count does not match entry count")
        return ScoreSet(tuple(ScoreEntry(e.voice_id, e.face_id, float(s)) for e, s in zip(self.entries, scores)))


# --- vector math -----------------------------------------------------------


def _check_same_dim(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise DimensionError(f"dimension mismatch: {a.shape} vs {b.shape}")


def norm(v) -> float:
    return float(np.linalg.norm(as_vector(v)))


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two nonzero vectors, clamped to [-1, 1]."""
    a, b = as_vector(a), as_vector(b)
    _check_same_dim(a, b)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine similarity of a zero-norm vector is undefined")
    value = float(np.dot(a, b) / (na * nb))
    return min(1.0, max(-1.0, value))


def l2_distance(a, b) -> float:
    a, b = as_vector(a), as_vector(b)
    _check_same_dim(a, b)
    return float(np.linalg.norm(a - b))


def normalize(v) -> np.ndarray:
    v = as_vector(v)
    n = np.linalg.norm(v)
    if n == 0.0 or not np.isfinite(n):
        raise DegenerateInputError("cannot normalize a zero (or non-finite) vector")
    return v / n


def normalize_rows(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise DegenerateInputError("cannot normalize a zero row")
    return m / norms


# --- file formats ----------------------------------------------------------


def format_real(x: float) -> str:
    x = float(x)
    if not math.isfinite(x):
        raise DegenerateInputError(f"cannot serialize non-finite value {x}")
    return repr(x)


def _parse_real(token: str, path, lineno) -> float:
    try:
        x = float(token)
    except ValueError:
        raise FormatError(f"not a real number: {token!r}", path, lineno) from None
    if not math.isfinite(x):
        raise FormatError(f"non-finite value {token!r}", path, lineno)
    return x


def index_records(records: Iterable[EmbeddingRecord]) -> dict[str, EmbeddingRecord]:
    """Map sample_id to record, rejecting duplicate ids."""
    out: dict[str, EmbeddingRecord] = {}
    for rec in records:
        if rec.sample_id in out:
            raise FormatError(f"duplicate sample id {rec.sample_id!r}")
        out[rec.sample_id] = rec
    return out


def dumps_embeddings(records: Sequence[EmbeddingRecord]) -> str:
    if not records:
        return ""
    dim = records[0].dim
    index_records(records)
    lines = [f"#dim {dim}"]
    for rec in records:
        if rec.dim != dim:
            raise DimensionError(f"{rec.sample_id}: dimension {rec.dim} differs from {dim}")
        ident = rec.identity if rec.identity is not None else NO_IDENTITY
        values = " ".join(format_real(x) for x in rec.vector)
        lines.append(f"{rec.sample_id}\t{rec.modality.value}\t{ident}\t{values}")
    return "\n".join(lines) + "\n"


def loads_embeddings(text: str, path=None) -> list[EmbeddingRecord]:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        return []
    header = lines[0]
    parts = header.split(" ")
    if len(parts) != 2 or parts[0] != "#dim":
        raise FormatError("expected header '#dim <d>'", path, 1)
    try:
        dim = int(parts[1])
    except ValueError:
        raise FormatError(f"bad dimension {parts[1]!r}", path, 1) from None
    if dim < 2:
        raise FormatError("dimension must be at least 2", path, 1)
    records: list[EmbeddingRecord] = []
    seen: set[str] = set()
    for lineno, line in enumerate(lines[1:], start=2):
        if line.endswith("\r"):
            raise FormatError("CR line ending", path, lineno)
        fields = line.split("\t")
        if len(fields) != 4:
            raise FormatError(f"expected 4 tab-separated fields, got {len(fields)}", path, lineno)
        sample_id, modality, identity, values = fields
        if modality not in ("voice", "face"):
            raise FormatError(f"unknown modality {modality!r}", path, lineno)
        tokens = values.split(" ")
        if len(tokens) != dim:
            raise FormatError(f"expected {dim} values, got {len(tokens)}", path, lineno)
        vector = [_parse_real(t, path, lineno) for t in tokens]
        if sample_id in seen:
            raise FormatError(f"duplicate sample id {sample_id!r}", path, lineno)
        seen.add(sample_id)
        try:
            rec = EmbeddingRecord(sample_id, Modality(modality), None if identity == NO_IDENTITY else identity, vector)
        except FormatError as exc:
            raise FormatError(str(exc), path, lineno) from None
        records.append(rec)
    return records


def _read_text(path) -> str:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        return fh.read()


def _write_text(path, text: str):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def read_embeddings(path) -> list[EmbeddingRecord]:
    return loads_embeddings(_read_text(path), path=os.fspath(path))


def write_embeddings(path, records: Sequence[EmbeddingRecord]):
    _write_text(path, dumps_embeddings(records))


def _csv_rows(text: str, header: list[str], path):
    reader = csv.reader(io.StringIO(text, newline=""))
    rows = list(reader)
    if not rows:
        raise FormatError(f"missing header {','.join(header)!r}", path, 1)
    if rows[0] != header:
        raise FormatError(f"expected header {','.join(header)!r}", path, 1)
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise FormatError(f"expected {len(header)} columns, got {len(row)}", path, lineno)
        yield lineno, row


def _csv_text(header: list[str], rows: Iterable[Sequence[str]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def read_pairs(path) -> list[TestPair]:
    path_s = os.fspath(path)
    pairs = []
    for lineno, (voice_id, face_id, label) in _csv_rows(_read_text(path), PAIR_HEADER, path_s):
        if not voice_id or not face_id:
            raise FormatError("empty sample id", path_s, lineno)
        if label not in ("0", "1", ""):
            raise FormatError(f"label must be 0, 1 or empty, got {label!r}", path_s, lineno)
        pairs.append(TestPair(voice_id, face_id, None if label == "" else label == "1"))
    return pairs


def write_pairs(path, pairs: Iterable[TestPair]):
    rows = ((p.voice_id, p.face_id, "" if p.label is None else str(int(p.label))) for p in pairs)
    _write_text(path, _csv_text(PAIR_HEADER, rows))


def read_scores(path) -> ScoreSet:
    path_s = os.fspath(path)
    entries = []
    for lineno, (voice_id, face_id, score) in _csv_rows(_read_text(path), SCORE_HEADER, path_s):
        entries.append(ScoreEntry(voice_id, face_id, _parse_real(score, path_s, lineno)))
    return ScoreSet(tuple(entries))


def write_scores(path, scores: ScoreSet):
    rows = ((e.voice_id, e.face_id, format_real(e.score)) for e in scores)
    _write_text(path, _csv_text(SCORE_HEADER, rows))


def write_csv(path, header: list[str], rows: Iterable[Sequence]):
    """Write a CSV with reals formatted exactly; used by report exporters."""

    def cell(x):
        if isinstance(x, (float, np.floating)):
            return format_real(x)
        if x is None:
            return ""
        return str(x)

    _write_text(path, _csv_text(header, ([cell(x) for x in row] for row in rows)))


def check_pairs_against(pairs: Sequence[TestPair], records: dict[str, EmbeddingRecord]):
    """Ensure every pair references an existing voice and face record."""
    for p in pairs:
        for sid, want in ((p.voice_id, Modality.VOICE), (p.face_id, Modality.FACE)):
            rec = records.get(sid)
            if rec is None:
                raise FormatError(f"pair references unknown sample id {sid!r}")
            if rec.modality is not want:
                raise FormatError(f"sample {sid!r} is {rec.modality.value}, expected {want.value}")
