"""Shared builders for synthetic corpora and documents."""

from __future__ import annotations

import json
from datetime import datetime, timedelta, timezone

import numpy as np
import pytest

from timefuse.corpus import Corpus, Document, EntitySpan, load_corpus


def utc(year, month, day, hour=0, minute=0, second=0):
    return datetime(year, month, day, hour, minute, second, tzinfo=timezone.utc)


def make_doc(doc_id, title="", body="", when=None, entities=(), event=None, lemmas=None):
    return Document(
        id=doc_id, title=title, body=body,
        timestamp=when or utc(2014, 1, 1),
        entities=tuple(entities), gold_event=event, lemmas=lemmas,
    )


def corpus_of(docs):
    return Corpus(documents=tuple(docs), epoch=min(d.timestamp for d in docs))


def record(doc_id, title="t", body="b", date="2014-01-01", entities=(), event=None):
    return {"id": doc_id, "title": title, "body": body, "date": date,
            "entities": list(entities), "event": event}


def write_corpus(path, records):
    with open(path, "w", encoding="utf-8") as handle:
        for rec in records:
            handle.write(json.dumps(rec) + "\n")
    return path


@pytest.fixture
def tiny_corpus_file(tmp_path):
    path = tmp_path / "corpus.jsonl"
    write_corpus(path, [
        record("d1", title="Typhoon hits Japan", body="A typhoon made landfall.",
               date="2014-07-08", event="typhoon",
               entities=[{"text": "Japan", "start": 13, "end": 18,
                          "type": "LOC", "field": "title"}]),
        record("d2", title="Typhoon nears Japan", body="The storm approaches the coast.",
               date="2014-07-07", event="typhoon"),
        record("d3", title="Stocks close higher", body="Markets rallied on earnings.",
               date="2014-07-08", event="stocks"),
    ])
    return path


def synthetic_event_corpus(n_events=4, docs_per_event=10, seed=0,
                           start=None, event_gap_days=20, within_days=3,
                           vocab_per_event=12, tokens_per_doc=10):
    """Separable labeled corpus: each event draws from its own token pool and
    occupies its own time window."""
    rng = np.random.default_rng(seed)
    start = start or utc(2014, 1, 1)
    docs = []
    for e in range(n_events):
        pool = [f"ev{e}tok{j}" for j in range(vocab_per_event)]
        base = start + timedelta(days=e * event_gap_days)
        for d in range(docs_per_event):
            words = [pool[i] for i in rng.integers(0, vocab_per_event, size=tokens_per_doc)]
            when = base + timedelta(hours=int(rng.integers(0, within_days * 24)))
            docs.append(make_doc(
                f"e{e}d{d}", title=f"event {e} update", body=" ".join(words),
                when=when, event=f"event-{e}"))
    docs.sort(key=lambda d: (d.timestamp, d.id))
    return corpus_of(docs)


@pytest.fixture
def loaded_tiny_corpus(tiny_corpus_file):
    return load_corpus(tiny_corpus_file)


def entity_span(text, start, end, kind="MISC", field="body"):
    return EntitySpan(surface=text, start=start, end=end, kind=kind, field=field)
