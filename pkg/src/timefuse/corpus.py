"""Corpus data model: loading, chronological ordering, timestep conversion.

A corpus is a UTF-8 line-delimited file, one JSON object per line with keys
``id``, ``title``, ``body``, ``date`` (ISO-8601), ``entities`` (array of
``{text, start, end, type, field}``) and ``event`` (string or null).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from datetime import datetime, timedelta, timezone
from enum import Enum
from typing import IO, Iterable

__all__ = [
    "CorpusError",
    "EntitySpan",
    "Document",
    "Corpus",
    "Granularity",
    "parse_timestamp",
    "format_timestamp",
    "load_corpus",
    "save_corpus",
    "sort_chronological",
    "timestep",
]


class CorpusError(ValueError):
    """Raised for malformed corpus files or invariant violations."""


class Granularity(Enum):
    """Timestep bucket width. Weekly/monthly are fixed-width (168h / 720h),
    not calendar-aligned."""

    HOURLY = 1
    DAILY = 24
    BIDAILY = 48
    WEEKLY = 168
    MONTHLY = 720

    @property
    def hours(self) -> int:
        return self.value

    @classmethod
    def parse(cls, name: str) -> "Granularity":
        try:
            return cls[name.upper()]
        except KeyError:
            raise CorpusError(f"unknown granularity {name!r}") from None


@dataclass(frozen=True)
class EntitySpan:
    """Character span of a named entity inside the title or the body."""

    surface: str
    start: int
    end: int
    kind: str
    field: str  # "title" | "body"


@dataclass(frozen=True)
class Document:
    id: str
    title: str
    body: str
    timestamp: datetime
    entities: tuple[EntitySpan, ...] = ()
    gold_event: str | None = None
    lemmas: tuple[tuple[str, ...], tuple[str, ...]] | None = None  # (title, body) override


@dataclass(frozen=True)
class Corpus:
    """Immutable document collection; ``epoch`` is the earliest timestamp."""

    documents: tuple[Document, ...]
    epoch: datetime

    def __len__(self) -> int:
        return len(self.documents)

    def __iter__(self):
        return iter(self.documents)

    def by_id(self) -> dict[str, Document]:
        return {d.id: d for d in self.documents}

    def has_gold(self) -> bool:
        return all(d.gold_event is not None for d in self.documents)


def parse_timestamp(raw: str) -> datetime:
    """Parse an ISO-8601 instant to an aware UTC datetime at second precision.

    Date-only stamps are read as T00:00:00Z.
    """
    text = raw.strip()
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    try:
        dt = datetime.fromisoformat(text)
    except ValueError:
        raise CorpusError(f"unparseable timestamp {raw!r}") from None
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.astimezone(timezone.utc).replace(microsecond=0)


def format_timestamp(dt: datetime) -> str:
    return dt.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _parse_entities(rec: dict, doc_id: str, title: str, body: str) -> tuple[EntitySpan, ...]:
    spans = []
    for ent in rec.get("entities") or ():
        try:
            span = EntitySpan(
                surface=str(ent["text"]),
                start=int(ent["start"]),
                end=int(ent["end"]),
                kind=str(ent.get("type", "")),
                field=str(ent.get("field", "body")),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise CorpusError(f"document {doc_id!r}: bad entity record ({exc})") from None
        if span.field not in ("title", "body"):
            raise CorpusError(f"document {doc_id!r}: entity field must be title or body")
        target = title if span.field == "title" else body
        if not (0 <= span.start < span.end <= len(target)):
            raise CorpusError(
                f"document {doc_id!r}: entity span [{span.start}, {span.end}) "
                f"out of range for {span.field} of length {len(target)}"
            )
        spans.append(span)
    for fld in ("title", "body"):
        in_field = sorted((s for s in spans if s.field == fld), key=lambda s: s.start)
        for a, b in zip(in_field, in_field[1:]):
            if b.start < a.end:
                raise CorpusError(f"document {doc_id!r}: overlapping entity spans in {fld}")
    return tuple(spans)


def _parse_record(rec: dict, doc_id: str) -> Document:
    title = str(rec.get("title", ""))
    body = str(rec.get("body", ""))
    ts = parse_timestamp(str(rec["date"]))
    event = rec.get("event")
    lemmas = None
    if "lemmas" in rec and rec["lemmas"] is not None:
        lem = rec["lemmas"]
        lemmas = (
            tuple(str(w) for w in lem.get("title", ())),
            tuple(str(w) for w in lem.get("body", ())),
        )
    return Document(
        id=doc_id,
        title=title,
        body=body,
        timestamp=ts,
        entities=_parse_entities(rec, doc_id, title, body),
        gold_event=None if event is None else str(event),
        lemmas=lemmas,
    )


def _documents_from_lines(lines: Iterable[str]) -> list[Document]:
    docs: list[Document] = []
    seen: set[str] = set()
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorpusError(f"line {lineno}: malformed JSON ({exc.msg})") from None
        if not isinstance(rec, dict) or "id" not in rec or "date" not in rec:
            raise CorpusError(f"line {lineno}: record must be an object with id and date")
        doc_id = str(rec["id"])
        if doc_id in seen:
            raise CorpusError(f"line {lineno}: duplicate id {doc_id!r}")
        seen.add(doc_id)
        try:
            docs.append(_parse_record(rec, doc_id))
        except CorpusError as exc:
            raise CorpusError(f"line {lineno}: {exc}") from None
    return docs


def load_corpus(path) -> Corpus:
    """Read a line-delimited corpus file, keeping documents in file order."""
    with open(path, encoding="utf-8") as handle:
        docs = _documents_from_lines(handle)
    if not docs:
        raise CorpusError("empty corpus")
    epoch = min(d.timestamp for d in docs)
    return Corpus(documents=tuple(docs), epoch=epoch)


def document_to_record(doc: Document) -> dict:
    rec = {
        "id": doc.id,
        "title": doc.title,
        "body": doc.body,
        "date": format_timestamp(doc.timestamp),
        "entities": [
            {"text": s.surface, "start": s.start, "end": s.end, "type": s.kind, "field": s.field}
            for s in doc.entities
        ],
        "event": doc.gold_event,
    }
    if doc.lemmas is not None:
        rec["lemmas"] = {"title": list(doc.lemmas[0]), "body": list(doc.lemmas[1])}
    return rec


def save_corpus(corpus: Corpus, handle: IO[str]) -> None:
    for doc in corpus.documents:
        handle.write(json.dumps(document_to_record(doc), ensure_ascii=False) + "\n")


def sort_chronological(corpus: Corpus) -> Corpus:
    """Stable sort by (timestamp, id); idempotent."""
    docs = tuple(sorted(corpus.documents, key=lambda d: (d.timestamp, d.id)))
    return replace(corpus, documents=docs)


def timestep(t: datetime, epoch: datetime, g: Granularity) -> int:
    """floor((t - epoch) / bucket width). Requires t >= epoch."""
    delta = t - epoch
    if delta < timedelta(0):
        raise CorpusError(f"timestamp {format_timestamp(t)} precedes epoch {format_timestamp(epoch)}")
    return int(math.floor(delta.total_seconds() / (g.hours * 3600.0)))
