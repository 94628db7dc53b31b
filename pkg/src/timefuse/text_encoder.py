"""Token-level text encodings with entity presence/absence augmentation.

Three interchangeable backends produce the per-token base matrix:

* ``precomputed`` — matrices loaded from a TEB1 file (e.g. exported from a
  real transformer), keyed by document id;
* ``toy`` — a trainable hashed word-embedding lookup, small enough to
  fine-tune on a laptop while exercising the full training path;
* ``hashed`` — deterministic hash-seeded Gaussian vectors, for reproducible
  tests without any training.

Every backend adds one of two learned vectors to each token row depending on
whether the token overlaps a named-entity span.
"""

from __future__ import annotations

import hashlib
import re
import struct
from dataclasses import dataclass

import numpy as np

from .corpus import Document

DEFAULT_MAX_SEQ_LEN = 230

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


class PrecomputedFormatError(ValueError):
    """Raised for malformed TEB1 files."""


@dataclass(frozen=True)
class Token:
    text: str
    start: int
    end: int
    field: str  # "title" | "body"
    entity: bool


def stable_hash64(text: str) -> int:
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "little")


def tokenize(doc: Document, max_seq_len: int = DEFAULT_MAX_SEQ_LEN) -> list[Token]:
    """Whitespace+punctuation tokens of title then body, capped at
    ``max_seq_len``. A token is entity-flagged iff its character span
    intersects an entity span of the same field.

    An empty document yields one synthetic unflagged token.
    """
    spans = {"title": [], "body": []}
    for ent in doc.entities:
        spans[ent.field].append((ent.start, ent.end))

    tokens: list[Token] = []
    for field, text in (("title", doc.title), ("body", doc.body)):
        field_spans = spans[field]
        for m in _TOKEN_RE.finditer(text):
            flag = any(m.start() < e and s < m.end() for s, e in field_spans)
            tokens.append(Token(m.group(), m.start(), m.end(), field, flag))
            if len(tokens) >= max_seq_len:
                return tokens
    if not tokens:
        tokens.append(Token("", 0, 0, "body", False))
    return tokens


class EncoderBackend:
    """Base class: owns the two entity vectors; subclasses own the token
    base vectors."""

    kind = "base"

    def __init__(self, d_model: int, rng: np.random.Generator):
        self.d_model = d_model
        self.entity_present = rng.normal(0.0, 0.02, size=d_model)
        self.entity_absent = rng.normal(0.0, 0.02, size=d_model)

    def base_matrix(self, doc: Document, tokens: list[Token]) -> np.ndarray:
        raise NotImplementedError

    def parameters(self) -> dict[str, np.ndarray]:
        return {"entity_present": self.entity_present, "entity_absent": self.entity_absent}

    def backward(self, doc: Document, tokens: list[Token], d_matrix: np.ndarray,
                 grads: dict[str, np.ndarray]) -> None:
        for t in range(d_matrix.shape[0]):
            flagged = tokens[t].entity if t < len(tokens) else False
            grads["entity_present" if flagged else "entity_absent"] += d_matrix[t]


class HashedRandomBackend(EncoderBackend):
    """Per-token vector drawn from a Generator seeded by a stable hash of the
    token text; bit-identical across runs and processes."""

    kind = "hashed"

    def __init__(self, d_model: int = 64, seed: int = 0):
        super().__init__(d_model, np.random.default_rng([seed, 0xE17]))
        self.seed = seed
        self._cache: dict[str, np.ndarray] = {}

    def _vector(self, text: str) -> np.ndarray:
        vec = self._cache.get(text)
        if vec is None:
            rng = np.random.default_rng([self.seed, stable_hash64(text)])
            vec = rng.normal(0.0, 1.0, size=self.d_model)
            self._cache[text] = vec
        return vec

    def base_matrix(self, doc: Document, tokens: list[Token]) -> np.ndarray:
        return np.stack([self._vector(t.text) for t in tokens])


class ToyTrainableBackend(EncoderBackend):
    """Trainable embedding lookup over a hashed vocabulary."""

    kind = "toy"

    def __init__(self, d_model: int = 64, n_buckets: int = 2 ** 16, seed: int = 0):
        super().__init__(d_model, np.random.default_rng([seed, 0xE17]))
        self.seed = seed
        self.n_buckets = n_buckets
        rng = np.random.default_rng([seed, 0x70B])
        self.table = rng.normal(0.0, 0.02, size=(n_buckets, d_model))

    def bucket(self, text: str) -> int:
        return stable_hash64(text) % self.n_buckets

    def base_matrix(self, doc: Document, tokens: list[Token]) -> np.ndarray:
        idx = [self.bucket(t.text) for t in tokens]
        return self.table[idx].copy()

    def parameters(self) -> dict[str, np.ndarray]:
        params = super().parameters()
        params["tok_table"] = self.table
        return params

    def backward(self, doc, tokens, d_matrix, grads) -> None:
        super().backward(doc, tokens, d_matrix, grads)
        for t, tok in enumerate(tokens[: d_matrix.shape[0]]):
            grads["tok_table"][self.bucket(tok.text)] += d_matrix[t]


class PrecomputedBackend(EncoderBackend):
    """Stored matrices keyed by document id (the TEB1 bridge). Entity vectors
    are added for the token positions our tokenizer can flag; rows past that
    get the absent vector."""

    kind = "precomputed"

    def __init__(self, matrices: dict[str, np.ndarray], d_model: int, seed: int = 0):
        super().__init__(d_model, np.random.default_rng([seed, 0xE17]))
        self.matrices = matrices

    def base_matrix(self, doc: Document, tokens: list[Token]) -> np.ndarray:
        try:
            return self.matrices[doc.id].astype(np.float64)
        except KeyError:
            raise KeyError(f"no precomputed matrix for document id {doc.id!r}") from None


def encode(doc: Document, backend: EncoderBackend,
           max_seq_len: int = DEFAULT_MAX_SEQ_LEN) -> np.ndarray:
    """Token matrix for ``doc``: backend base vectors plus the entity
    presence/absence vector per token."""
    tokens = tokenize(doc, max_seq_len)
    matrix = backend.base_matrix(doc, tokens)
    for t in range(matrix.shape[0]):
        flagged = tokens[t].entity if t < len(tokens) else False
        matrix[t] += backend.entity_present if flagged else backend.entity_absent
    if not np.all(np.isfinite(matrix)):
        raise ValueError(f"non-finite token matrix for document {doc.id!r}")
    return matrix


# ---------------------------------------------------------------------------
# TEB1 binary format: magic "TEB1", u32 doc_count, u32 d_model; per document
# u16 id_len, id bytes (UTF-8), u32 seq_len, seq_len*d_model f32 row-major.
# All integers and floats little-endian.
# ---------------------------------------------------------------------------

TEB1_MAGIC = b"TEB1"


def _read_exact(handle, n: int, what: str) -> bytes:
    data = handle.read(n)
    if len(data) != n:
        raise PrecomputedFormatError(f"truncated TEB1 file while reading {what}")
    return data


def read_teb1(path) -> tuple[dict[str, np.ndarray], int]:
    """Parse a TEB1 file into an id -> (seq_len, d_model) f32 matrix map."""
    matrices: dict[str, np.ndarray] = {}
    with open(path, "rb") as handle:
        if _read_exact(handle, 4, "magic") != TEB1_MAGIC:
            raise PrecomputedFormatError("bad TEB1 magic bytes")
        doc_count, d_model = struct.unpack("<II", _read_exact(handle, 8, "header"))
        if d_model == 0:
            raise PrecomputedFormatError("TEB1 header d_model must be positive")
        for _ in range(doc_count):
            (id_len,) = struct.unpack("<H", _read_exact(handle, 2, "id length"))
            doc_id = _read_exact(handle, id_len, "id").decode("utf-8")
            (seq_len,) = struct.unpack("<I", _read_exact(handle, 4, "seq_len"))
            payload = _read_exact(handle, 4 * seq_len * d_model, f"matrix for {doc_id!r}")
            if doc_id in matrices:
                raise PrecomputedFormatError(f"duplicate id {doc_id!r} in TEB1 file")
            matrices[doc_id] = np.frombuffer(payload, dtype="<f4").reshape(seq_len, d_model)
        if handle.read(1):
            raise PrecomputedFormatError("trailing bytes after final TEB1 record")
    return matrices, int(d_model)


def write_teb1(records: list[tuple[str, np.ndarray]], d_model: int, handle) -> None:
    handle.write(TEB1_MAGIC)
    handle.write(struct.pack("<II", len(records), d_model))
    for doc_id, matrix in records:
        if matrix.ndim != 2 or matrix.shape[1] != d_model:
            raise ValueError(f"matrix for {doc_id!r} must be (seq_len, {d_model})")
        raw = doc_id.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"id too long for TEB1: {doc_id!r}")
        handle.write(struct.pack("<H", len(raw)))
        handle.write(raw)
        handle.write(struct.pack("<I", matrix.shape[0]))
        handle.write(np.ascontiguousarray(matrix, dtype="<f4").tobytes())


def load_precomputed(path, seed: int = 0) -> PrecomputedBackend:
    """Read a TEB1 file into a precomputed backend; d_model from the header."""
    matrices, d_model = read_teb1(path)
    return PrecomputedBackend(matrices, d_model, seed=seed)


def validate_teb1(path) -> tuple[int, int]:
    """Raise PrecomputedFormatError unless ``path`` is well-formed TEB1;
    return (doc_count, d_model)."""
    matrices, d_model = read_teb1(path)
    return len(matrices), d_model
