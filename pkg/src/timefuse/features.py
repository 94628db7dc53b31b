"""Sparse featurization for the streaming pipeline.

Each document gets 9 TF-IDF subvectors ({tokens, lemmas, entities} x
{title, body, all}), one dense fused vector and its timestamp. Similarity
against a cluster is an 11-vector: 9 subvector cosines, the dense cosine and
a Gaussian time-decay score.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from datetime import datetime

import numpy as np

from .corpus import Corpus, Document
from .ioutil import read_jsonl, write_jsonl

CHANNELS = ("tokens", "lemmas", "entities")
SECTIONS = ("title", "body", "all")
SUBVECTOR_KEYS = tuple((c, s) for c in CHANNELS for s in SECTIONS)
FEATURE_NAMES = tuple(f"{c}_{s}" for c, s in SUBVECTOR_KEYS) + ("dense", "time")

VOCAB_LIMIT = 50_000
DEFAULT_TIME_SIGMA_DAYS = 3.0

STOP_WORDS = frozenset("""
a an and are as at be but by for from has have he her his i if in into is it
its me my no not of on or our she so that the their them they this to was we
were what when where which who will with you your
""".split())

_WORD_RE = re.compile(r"\w+", re.UNICODE)

SparseVector = dict[str, float]


def stem(word: str) -> str:
    """Deterministic suffix stripper standing in for lemmatization."""
    w = word
    if w.endswith("sses"):
        w = w[:-2]
    elif w.endswith("ies") and len(w) > 4:
        w = w[:-3] + "y"
    elif w.endswith("s") and not w.endswith("ss") and len(w) > 3:
        w = w[:-1]
    if w.endswith("ing") and len(w) > 5:
        w = w[:-3]
    elif w.endswith("ed") and len(w) > 4:
        w = w[:-2]
    elif w.endswith("ly") and len(w) > 4:
        w = w[:-2]
    return w


def _words(text: str) -> list[str]:
    return _WORD_RE.findall(text.lower())


def _channel_terms(doc: Document, channel: str, section: str) -> list[str]:
    if channel == "entities":
        return [e.surface.lower() for e in doc.entities
                if section == "all" or e.field == section]
    if section == "all":
        return _channel_terms(doc, channel, "title") + _channel_terms(doc, channel, "body")
    text = doc.title if section == "title" else doc.body
    if channel == "tokens":
        return [w for w in _words(text) if w not in STOP_WORDS]
    # lemmas: per-document overrides win over the stemmer
    if doc.lemmas is not None:
        provided = doc.lemmas[0] if section == "title" else doc.lemmas[1]
        return [w.lower() for w in provided if w.lower() not in STOP_WORDS]
    return [stem(w) for w in _words(text) if w not in STOP_WORDS]


@dataclass
class Vocabulary:
    """Per-channel document frequencies and smoothed idf over a training
    corpus."""

    n_docs: int
    df: dict[str, dict[str, int]]   # channel -> term -> document frequency
    idf: dict[str, dict[str, float]]

    def terms(self, channel: str) -> set[str]:
        return set(self.idf[channel])


def _idf(n_docs: int, df: int) -> float:
    return math.log((n_docs + 1) / (df + 1)) + 1.0


def build_vocabulary(corpus: Corpus, limit: int = VOCAB_LIMIT) -> Vocabulary:
    """Count document frequencies per channel over title+body, apply the
    stop list, keep the ``limit`` most frequent terms per channel."""
    if len(corpus) == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    df: dict[str, dict[str, int]] = {c: {} for c in CHANNELS}
    for doc in corpus.documents:
        for channel in CHANNELS:
            for term in set(_channel_terms(doc, channel, "all")):
                df[channel][term] = df[channel].get(term, 0) + 1
    n = len(corpus)
    kept: dict[str, dict[str, int]] = {}
    idf: dict[str, dict[str, float]] = {}
    for channel in CHANNELS:
        top = sorted(df[channel].items(), key=lambda kv: (-kv[1], kv[0]))[:limit]
        kept[channel] = dict(top)
        idf[channel] = {term: _idf(n, count) for term, count in top}
    return Vocabulary(n_docs=n, df=kept, idf=idf)


def save_vocabulary(vocab: Vocabulary, path) -> None:
    records = [{"channel": "__meta__", "term": "", "df": vocab.n_docs, "idf": 0.0}]
    for channel in CHANNELS:
        for term in sorted(vocab.df[channel]):
            records.append({"channel": channel, "term": term,
                            "df": vocab.df[channel][term],
                            "idf": vocab.idf[channel][term]})
    write_jsonl(path, records)


def load_vocabulary(path) -> Vocabulary:
    n_docs = 0
    df: dict[str, dict[str, int]] = {c: {} for c in CHANNELS}
    idf: dict[str, dict[str, float]] = {c: {} for c in CHANNELS}
    for rec in read_jsonl(path):
        if rec["channel"] == "__meta__":
            n_docs = int(rec["df"])
            continue
        df[rec["channel"]][rec["term"]] = int(rec["df"])
        idf[rec["channel"]][rec["term"]] = float(rec["idf"])
    return Vocabulary(n_docs=n_docs, df=df, idf=idf)


def l2_normalize(vec: SparseVector) -> SparseVector:
    norm = math.sqrt(sum(w * w for w in vec.values()))
    if norm == 0.0:
        return {}
    return {t: w / norm for t, w in vec.items()}


def sparse_cosine(a: SparseVector, b: SparseVector) -> float:
    """Cosine over shared support; 0 when either side is empty."""
    if not a or not b:
        return 0.0
    if len(b) < len(a):
        a, b = b, a
    dot = sum(w * b[t] for t, w in a.items() if t in b)
    na = math.sqrt(sum(w * w for w in a.values()))
    nb = math.sqrt(sum(w * w for w in b.values()))
    return dot / (na * nb)


def featurize(doc: Document, vocab: Vocabulary) -> dict[tuple[str, str], SparseVector]:
    """The 9 L2-normalized tf-idf subvectors for one document."""
    out: dict[tuple[str, str], SparseVector] = {}
    for channel, section in SUBVECTOR_KEYS:
        idf = vocab.idf[channel]
        counts: dict[str, int] = {}
        for term in _channel_terms(doc, channel, section):
            if term in idf:
                counts[term] = counts.get(term, 0) + 1
        out[(channel, section)] = l2_normalize(
            {t: c * idf[t] for t, c in counts.items()})
    return out


def time_similarity(t1: datetime, t2: datetime,
                    sigma_days: float = DEFAULT_TIME_SIGMA_DAYS) -> float:
    """Gaussian decay in (0, 1]: exp(-(days apart)^2 / (2 sigma^2)).

    Floored at 1e-300 so the score stays positive where exp underflows.
    """
    delta_days = abs((t1 - t2).total_seconds()) / 86400.0
    return max(math.exp(-(delta_days ** 2) / (2.0 * sigma_days ** 2)), 1e-300)


@dataclass
class FeatureBundle:
    doc_id: str
    subvectors: dict[tuple[str, str], SparseVector]
    dense: np.ndarray
    timestamp: datetime


def bundle_document(doc: Document, vocab: Vocabulary, dense: np.ndarray) -> FeatureBundle:
    return FeatureBundle(doc_id=doc.id, subvectors=featurize(doc, vocab),
                         dense=dense, timestamp=doc.timestamp)


def dense_cosine(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(u @ v) / float(nu * nv)


def doc_cluster_features(bundle: FeatureBundle, cluster,
                         sigma_days: float = DEFAULT_TIME_SIGMA_DAYS) -> np.ndarray:
    """11 similarity features of (document, cluster): one cosine per
    subvector against the cluster centroid, the dense cosine, and the time
    decay against the cluster's newest timestamp."""
    feats = np.empty(len(FEATURE_NAMES))
    for i, key in enumerate(SUBVECTOR_KEYS):
        feats[i] = sparse_cosine(bundle.subvectors[key], cluster.subvector_centroid(key))
    feats[9] = dense_cosine(bundle.dense, cluster.dense_centroid)
    feats[10] = time_similarity(bundle.timestamp, cluster.newest_timestamp, sigma_days)
    return feats
