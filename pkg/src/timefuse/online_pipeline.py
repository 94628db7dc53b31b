"""Streaming event detection over a cluster pool.

Each incoming document is featurized, scored against every pooled cluster by
a linear weighted-similarity model, and either merged into the best cluster
or made into a new cluster by a logistic creation model. Documents must
arrive in non-decreasing timestamp order; violations raise.

Training data for both models comes from replaying a gold-labeled stream:
ranking pairs (gold cluster vs. every other cluster) and creation labels
(whether the document's event was new at that point), the latter balanced by
downsampling the majority class.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from datetime import datetime

import numpy as np

from .corpus import Corpus, Document, format_timestamp, parse_timestamp
from .features import (
    DEFAULT_TIME_SIGMA_DAYS,
    FEATURE_NAMES,
    SUBVECTOR_KEYS,
    FeatureBundle,
    Vocabulary,
    bundle_document,
    doc_cluster_features,
    l2_normalize,
)
from .ioutil import atomic_write

N_FEATURES = len(FEATURE_NAMES)


class Cluster:
    """One pooled event: running subvector sums (renormalized on read), a
    running dense mean, and the newest member timestamp."""

    def __init__(self, cluster_id: int, bundle: FeatureBundle):
        self.id = cluster_id
        self.members: list[str] = [bundle.doc_id]
        self._sums = {key: dict(bundle.subvectors[key]) for key in SUBVECTOR_KEYS}
        self.dense_centroid = bundle.dense.astype(np.float64).copy()
        self.newest_timestamp = bundle.timestamp

    def add(self, bundle: FeatureBundle) -> None:
        self.members.append(bundle.doc_id)
        for key in SUBVECTOR_KEYS:
            sums = self._sums[key]
            for term, w in bundle.subvectors[key].items():
                sums[term] = sums.get(term, 0.0) + w
        n = len(self.members)
        self.dense_centroid = self.dense_centroid + (bundle.dense - self.dense_centroid) / n
        if bundle.timestamp > self.newest_timestamp:
            self.newest_timestamp = bundle.timestamp

    def subvector_centroid(self, key) -> dict[str, float]:
        return l2_normalize(self._sums[key])


class ClusterPool:
    def __init__(self):
        self.clusters: dict[int, Cluster] = {}
        self.next_id = 0

    def __len__(self) -> int:
        return len(self.clusters)

    def create(self, bundle: FeatureBundle) -> int:
        cid = self.next_id
        self.next_id += 1
        self.clusters[cid] = Cluster(cid, bundle)
        return cid

    def merge(self, cluster_id: int, bundle: FeatureBundle) -> None:
        self.clusters[cluster_id].add(bundle)


@dataclass
class RankerModel:
    weights: np.ndarray = field(default_factory=lambda: np.zeros(N_FEATURES))
    bias: float = 0.0

    def score(self, features: np.ndarray) -> float:
        return float(self.weights @ features) + self.bias


@dataclass
class CreationModel:
    weights: np.ndarray = field(default_factory=lambda: np.zeros(N_FEATURES))
    bias: float = 0.0
    threshold: float = 0.5

    def probability(self, features: np.ndarray) -> float:
        z = float(self.weights @ features) + self.bias
        return float(1.0 / (1.0 + np.exp(-z)))

    def decide_create(self, features: np.ndarray) -> bool:
        return self.probability(features) >= self.threshold


def rank_clusters(bundle: FeatureBundle, pool: ClusterPool, ranker,
                  sigma_days: float = DEFAULT_TIME_SIGMA_DAYS):
    """Best (cluster id, score) under the ranker, ties to the lower id;
    None when the pool is empty."""
    best = None
    for cid in sorted(pool.clusters):
        feats = doc_cluster_features(bundle, pool.clusters[cid], sigma_days)
        score = ranker.score(feats)
        if best is None or score > best[1]:
            best = (cid, score)
    return best


class OnlinePipeline:
    """Mutable streaming state: encoder, vocabulary, pool and the two
    decision models. ``features`` is the single extension point (tests use
    it to inject oracle features)."""

    def __init__(self, model, vocab: Vocabulary, epoch: datetime,
                 ranker: RankerModel | None = None, creator: CreationModel | None = None,
                 sigma_days: float = DEFAULT_TIME_SIGMA_DAYS):
        self.model = model
        self.vocab = vocab
        self.epoch = epoch
        self.ranker = ranker
        self.creator = creator
        self.sigma_days = sigma_days
        self.pool = ClusterPool()
        self.last_timestamp: datetime | None = None

    def bundle(self, doc: Document) -> FeatureBundle:
        dense = self.model.embed_document(doc, self.epoch)
        return bundle_document(doc, self.vocab, dense)

    def features(self, bundle: FeatureBundle, cluster: Cluster) -> np.ndarray:
        return doc_cluster_features(bundle, cluster, self.sigma_days)

    def rank(self, bundle: FeatureBundle):
        best = None
        for cid in sorted(self.pool.clusters):
            score = self.ranker.score(self.features(bundle, self.pool.clusters[cid]))
            if best is None or score > best[1]:
                best = (cid, score)
        return best

    def process_document(self, doc: Document) -> dict:
        if self.last_timestamp is not None and doc.timestamp < self.last_timestamp:
            raise ValueError(
                f"document {doc.id!r} out of order: {format_timestamp(doc.timestamp)} "
                f"precedes {format_timestamp(self.last_timestamp)}")
        self.last_timestamp = doc.timestamp
        bundle = self.bundle(doc)
        best = self.rank(bundle)
        if best is None:
            created = True
        else:
            cid, _ = best
            created = self.creator.decide_create(
                self.features(bundle, self.pool.clusters[cid]))
        if created:
            cid = self.pool.create(bundle)
        else:
            self.pool.merge(cid, bundle)
        return {"doc_id": doc.id, "cluster_id": cid, "created": created}

    def process_stream(self, documents) -> list[dict]:
        return [self.process_document(doc) for doc in documents]


# ---------------------------------------------------------------------------
# training-data construction by gold replay
# ---------------------------------------------------------------------------

def _gold_replay(corpus: Corpus, vocab: Vocabulary, model, sigma_days: float):
    """Yield (bundle, gold_pool, gold_cluster_id_or_None) before inserting
    each document into its gold cluster."""
    pool = ClusterPool()
    by_event: dict[str, int] = {}
    for doc in corpus.documents:
        if doc.gold_event is None:
            raise ValueError(f"document {doc.id!r} has no gold event label")
        dense = model.embed_document(doc, corpus.epoch)
        bundle = bundle_document(doc, vocab, dense)
        gold_cid = by_event.get(doc.gold_event)
        yield bundle, pool, gold_cid
        if gold_cid is None:
            by_event[doc.gold_event] = pool.create(bundle)
        else:
            pool.merge(gold_cid, bundle)


def make_ranker_examples(corpus: Corpus, vocab: Vocabulary, model,
                         sigma_days: float = DEFAULT_TIME_SIGMA_DAYS,
                         ) -> list[tuple[np.ndarray, np.ndarray]]:
    """(positive, negative) feature pairs from a gold replay: whenever a
    document's gold cluster exists alongside others, pair it against each
    competing cluster."""
    pairs = []
    for bundle, pool, gold_cid in _gold_replay(corpus, vocab, model, sigma_days):
        if gold_cid is None or len(pool) < 2:
            continue
        pos = doc_cluster_features(bundle, pool.clusters[gold_cid], sigma_days)
        for cid, cluster in sorted(pool.clusters.items()):
            if cid != gold_cid:
                pairs.append((pos, doc_cluster_features(bundle, cluster, sigma_days)))
    return pairs


def make_creation_examples(corpus: Corpus, vocab: Vocabulary, model, ranker,
                           sigma_days: float = DEFAULT_TIME_SIGMA_DAYS, seed: int = 0,
                           ) -> tuple[np.ndarray, np.ndarray, dict]:
    """Balanced (features, labels) for the creation model. Label 1 means the
    document's gold event was new at that point; features are taken against
    the ranker's best cluster, mirroring the inference path. The majority
    class is downsampled (seeded) to the minority size."""
    feats: list[np.ndarray] = []
    labels: list[int] = []
    for bundle, pool, gold_cid in _gold_replay(corpus, vocab, model, sigma_days):
        if len(pool) == 0:
            continue  # an empty pool always creates; no decision to learn
        best = rank_clusters(bundle, pool, ranker, sigma_days)
        feats.append(doc_cluster_features(bundle, pool.clusters[best[0]], sigma_days))
        labels.append(1 if gold_cid is None else 0)

    X = np.array(feats)
    y = np.array(labels, dtype=int)
    stats = {"n_total": len(y), "positive_share": float(y.mean()) if len(y) else 0.0}
    pos_idx = np.flatnonzero(y == 1)
    neg_idx = np.flatnonzero(y == 0)
    if len(pos_idx) == 0 or len(neg_idx) == 0:
        warnings.warn("creation examples are single-class; emitting unbalanced")
        stats["balanced"] = False
        return X, y, stats
    rng = np.random.default_rng(seed)
    if len(pos_idx) > len(neg_idx):
        pos_idx = np.sort(rng.choice(pos_idx, size=len(neg_idx), replace=False))
    elif len(neg_idx) > len(pos_idx):
        neg_idx = np.sort(rng.choice(neg_idx, size=len(pos_idx), replace=False))
    keep = np.sort(np.concatenate([pos_idx, neg_idx]))
    stats["balanced"] = True
    return X[keep], y[keep], stats


# ---------------------------------------------------------------------------
# model training (margin ranking / logistic), 5-fold cross-validation
# ---------------------------------------------------------------------------

def _folds(n: int, k: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i::k] for i in range(k)]


def _fit_ranker(diffs: np.ndarray, margin: float, lr: float, iters: int) -> np.ndarray:
    w = np.zeros(diffs.shape[1])
    for _ in range(iters):
        viol = diffs @ w < margin
        if not viol.any():
            break
        w += lr * diffs[viol].sum(axis=0) / len(diffs)
    return w


def train_ranker(pairs, margin: float | None = None, seed: int = 0,
                 iters: int = 500) -> RankerModel:
    """Minimize the margin ranking loss mean(max(0, margin - (s_pos -
    s_neg))) by gradient descent. Margin and learning rate are picked by
    5-fold cross-validation on pairwise accuracy (unless ``margin`` is
    pinned)."""
    if not pairs:
        raise ValueError("no ranking pairs to train on")
    diffs = np.array([pos - neg for pos, neg in pairs])
    margins = [margin] if margin is not None else [0.05, 0.1, 0.3, 0.5]
    lrs = [0.01, 0.1, 0.5]
    rng = np.random.default_rng(seed)
    n = len(diffs)

    best = None
    if n >= 5:
        folds = _folds(n, 5, rng)
        for m in margins:
            for lr in lrs:
                correct = total = 0
                for i in range(5):
                    mask = np.ones(n, dtype=bool)
                    mask[folds[i]] = False
                    w = _fit_ranker(diffs[mask], m, lr, iters)
                    correct += int((diffs[folds[i]] @ w > 0).sum())
                    total += len(folds[i])
                acc = correct / total if total else 0.0
                if best is None or acc > best[0]:
                    best = (acc, m, lr)
    else:
        best = (0.0, margins[0], lrs[-1])

    _, m, lr = best
    w = _fit_ranker(diffs, m, lr, iters)
    return RankerModel(weights=w, bias=0.0)


def ranking_loss(pairs, ranker: RankerModel, margin: float) -> float:
    diffs = np.array([pos - neg for pos, neg in pairs])
    return float(np.maximum(0.0, margin - diffs @ ranker.weights).mean())


def _fit_logistic(X: np.ndarray, y: np.ndarray, lr: float, iters: int):
    w = np.zeros(X.shape[1])
    b = 0.0
    for _ in range(iters):
        z = X @ w + b
        p = 1.0 / (1.0 + np.exp(-z))
        err = p - y
        w -= lr * (X.T @ err) / len(y)
        b -= lr * float(err.mean())
    return w, b


def train_creation_model(X: np.ndarray, y: np.ndarray, seed: int = 0,
                         iters: int = 2000) -> CreationModel:
    """Logistic regression by gradient descent; learning rate picked by
    5-fold cross-validation, decision threshold fixed at 0.5."""
    y = np.asarray(y, dtype=np.float64)
    if len(set(y.tolist())) < 2:
        raise ValueError("creation model needs both classes present")
    lrs = [0.05, 0.2, 1.0]
    rng = np.random.default_rng(seed)
    n = len(y)
    best = None
    if n >= 10:
        folds = _folds(n, 5, rng)
        for lr in lrs:
            correct = total = 0
            for i in range(5):
                mask = np.ones(n, dtype=bool)
                mask[folds[i]] = False
                if len(set(y[mask].tolist())) < 2:
                    continue
                w, b = _fit_logistic(X[mask], y[mask], lr, iters)
                pred = (X[folds[i]] @ w + b) >= 0.0
                correct += int((pred == (y[folds[i]] == 1.0)).sum())
                total += len(folds[i])
            acc = correct / total if total else 0.0
            if best is None or acc > best[0]:
                best = (acc, lr)
    else:
        best = (0.0, lrs[-1])

    w, b = _fit_logistic(X, y, best[1], iters)
    return CreationModel(weights=w, bias=b, threshold=0.5)


# ---------------------------------------------------------------------------
# pool snapshots (resume support)
# ---------------------------------------------------------------------------

def save_pool(pool: ClusterPool, path, processed_count: int, epoch: datetime) -> None:
    state = {
        "next_id": pool.next_id,
        "processed_count": processed_count,
        "epoch": format_timestamp(epoch),
        "clusters": [
            {
                "id": c.id,
                "members": c.members,
                "sums": {f"{ch}|{sec}": c._sums[(ch, sec)] for ch, sec in SUBVECTOR_KEYS},
                "dense_centroid": c.dense_centroid.tolist(),
                "newest_timestamp": format_timestamp(c.newest_timestamp),
            }
            for _, c in sorted(pool.clusters.items())
        ],
    }
    with atomic_write(path) as handle:
        json.dump(state, handle)
        handle.write("\n")


def load_pool(path) -> tuple[ClusterPool, int, datetime]:
    with open(path, encoding="utf-8") as handle:
        state = json.load(handle)
    pool = ClusterPool()
    pool.next_id = state["next_id"]
    for rec in state["clusters"]:
        cluster = Cluster.__new__(Cluster)
        cluster.id = rec["id"]
        cluster.members = list(rec["members"])
        cluster._sums = {}
        for ch, sec in SUBVECTOR_KEYS:
            raw = rec["sums"][f"{ch}|{sec}"]
            cluster._sums[(ch, sec)] = {t: float(w) for t, w in raw.items()}
        cluster.dense_centroid = np.array(rec["dense_centroid"], dtype=np.float64)
        cluster.newest_timestamp = parse_timestamp(rec["newest_timestamp"])
        pool.clusters[cluster.id] = cluster
    return pool, int(state["processed_count"]), parse_timestamp(state["epoch"])


def write_stream_events(events, handle) -> None:
    for event in events:
        handle.write(json.dumps(event) + "\n")
