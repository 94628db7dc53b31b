import numpy as np
import pytest

from timefuse.corpus import Granularity
from timefuse.evaluation import bcubed
from timefuse.features import (
    SUBVECTOR_KEYS,
    build_vocabulary,
    bundle_document,
    l2_normalize,
)
from timefuse.fusion import FusionModel
from timefuse.online_pipeline import (
    Cluster,
    ClusterPool,
    CreationModel,
    OnlinePipeline,
    RankerModel,
    load_pool,
    make_creation_examples,
    make_ranker_examples,
    rank_clusters,
    ranking_loss,
    save_pool,
    train_creation_model,
    train_ranker,
)
from timefuse.text_encoder import HashedRandomBackend
from timefuse.time_encoding import TimeEncoder, TimeEncoderConfig

from conftest import corpus_of, make_doc, synthetic_event_corpus, utc


def tiny_model(d_model=16, seed=0):
    backend = HashedRandomBackend(d_model=d_model, seed=seed)
    config = TimeEncoderConfig(method="sinpe", d_model=d_model,
                               granularity=Granularity.DAILY)
    return FusionModel(backend, TimeEncoder(config), strategy="CM", n_heads=2, seed=seed)


def stream_corpus(n_events=6, docs_per_event=6, seed=0, event_gap_days=4,
                  within_days=6):
    return synthetic_event_corpus(
        n_events=n_events, docs_per_event=docs_per_event, seed=seed,
        event_gap_days=event_gap_days, within_days=within_days)


def bundles_for(corpus, model):
    vocab = build_vocabulary(corpus)
    return vocab, [bundle_document(d, vocab, model.embed_document(d, corpus.epoch))
                   for d in corpus.documents]


class TestCluster:
    def test_incremental_equals_recompute(self):
        corpus = stream_corpus(n_events=2, docs_per_event=5, seed=1)
        model = tiny_model()
        _, bundles = bundles_for(corpus, model)
        cluster = Cluster(0, bundles[0])
        for b in bundles[1:4]:
            cluster.add(b)
        # recompute from scratch
        dense = np.mean([b.dense for b in bundles[:4]], axis=0)
        np.testing.assert_allclose(cluster.dense_centroid, dense, atol=1e-9)
        for key in SUBVECTOR_KEYS:
            summed = {}
            for b in bundles[:4]:
                for t, w in b.subvectors[key].items():
                    summed[t] = summed.get(t, 0.0) + w
            expected = l2_normalize(summed)
            got = cluster.subvector_centroid(key)
            assert set(got) == set(expected)
            for t in expected:
                assert got[t] == pytest.approx(expected[t], abs=1e-9)

    def test_newest_timestamp_tracks_max(self):
        corpus = stream_corpus(n_events=1, docs_per_event=4, seed=2)
        model = tiny_model()
        _, bundles = bundles_for(corpus, model)
        cluster = Cluster(0, bundles[0])
        for b in bundles[1:]:
            cluster.add(b)
        assert cluster.newest_timestamp == max(b.timestamp for b in bundles)


class TestRankClusters:
    def test_empty_pool_returns_none(self):
        corpus = stream_corpus(n_events=1, docs_per_event=1, seed=3)
        model = tiny_model()
        _, bundles = bundles_for(corpus, model)
        assert rank_clusters(bundles[0], ClusterPool(), RankerModel()) is None

    def test_dense_weight_isolates_dense_argmax(self):
        corpus = stream_corpus(n_events=3, docs_per_event=3, seed=4)
        model = tiny_model()
        _, bundles = bundles_for(corpus, model)
        pool = ClusterPool()
        for i in (0, 3, 6):
            pool.create(bundles[i])
        weights = np.zeros(11)
        weights[9] = 1.0  # dense cosine only
        ranker = RankerModel(weights=weights)
        probe = bundles[1]
        best = rank_clusters(probe, pool, ranker)
        dense_cos = []
        for cid in sorted(pool.clusters):
            c = pool.clusters[cid].dense_centroid
            dense_cos.append(float(probe.dense @ c /
                                   (np.linalg.norm(probe.dense) * np.linalg.norm(c))))
        assert best[0] == int(np.argmax(dense_cos))

    def test_matches_exhaustive_scoring(self):
        corpus = stream_corpus(n_events=3, docs_per_event=4, seed=5)
        model = tiny_model()
        _, bundles = bundles_for(corpus, model)
        pool = ClusterPool()
        pool.create(bundles[0])
        for b in bundles[1:3]:
            pool.merge(0, b)
        for i in (4, 8):
            pool.create(bundles[i])
        rng = np.random.default_rng(6)
        ranker = RankerModel(weights=rng.normal(size=11), bias=0.3)
        probe = bundles[10]
        best = rank_clusters(probe, pool, ranker)
        from timefuse.features import doc_cluster_features
        scores = {cid: ranker.score(doc_cluster_features(probe, c))
                  for cid, c in pool.clusters.items()}
        top = max(sorted(scores), key=lambda cid: scores[cid])
        assert best == (top, pytest.approx(scores[top]))

    def test_weight_scaling_leaves_argmax_unchanged(self):
        corpus = stream_corpus(n_events=4, docs_per_event=3, seed=7)
        model = tiny_model()
        _, bundles = bundles_for(corpus, model)
        pool = ClusterPool()
        for i in (0, 3, 6, 9):
            pool.create(bundles[i])
        rng = np.random.default_rng(8)
        w = rng.normal(size=11)
        for c in (0.5, 3.0, 100.0):
            a = rank_clusters(bundles[1], pool, RankerModel(weights=w, bias=0.1))
            b = rank_clusters(bundles[1], pool, RankerModel(weights=c * w, bias=c * 0.1))
            assert a[0] == b[0]


class TestProcessDocument:
    def _pipeline(self, corpus, creator=None, ranker=None):
        model = tiny_model()
        vocab = build_vocabulary(corpus)
        return OnlinePipeline(model, vocab, corpus.epoch,
                              ranker or RankerModel(weights=np.full(11, 1.0)),
                              creator or CreationModel())

    def test_first_document_creates_cluster_zero(self):
        corpus = stream_corpus(n_events=2, docs_per_event=2, seed=9)
        pipeline = self._pipeline(corpus)
        event = pipeline.process_document(corpus.documents[0])
        assert event == {"doc_id": corpus.documents[0].id, "cluster_id": 0,
                         "created": True}

    def test_duplicate_doc_merges_with_favorable_models(self):
        corpus = stream_corpus(n_events=1, docs_per_event=2, seed=10)
        # creation model that almost never fires: big negative bias
        creator = CreationModel(weights=np.zeros(11), bias=-10.0)
        pipeline = self._pipeline(corpus, creator=creator)
        first = pipeline.process_document(corpus.documents[0])
        second = pipeline.process_document(corpus.documents[1])
        assert second["cluster_id"] == first["cluster_id"]
        assert not second["created"]

    def test_out_of_order_rejected(self):
        corpus = stream_corpus(n_events=2, docs_per_event=2, seed=11)
        pipeline = self._pipeline(corpus)
        pipeline.process_document(corpus.documents[-1])
        with pytest.raises(ValueError, match="out of order"):
            pipeline.process_document(corpus.documents[0])

    def test_pool_ids_strictly_increasing(self):
        corpus = stream_corpus(n_events=3, docs_per_event=3, seed=12)
        creator = CreationModel(weights=np.zeros(11), bias=10.0)  # always create
        pipeline = self._pipeline(corpus, creator=creator)
        events = pipeline.process_stream(corpus.documents)
        created_ids = [e["cluster_id"] for e in events if e["created"]]
        assert created_ids == sorted(created_ids)
        assert len(pipeline.pool) == len(created_ids) == len(corpus)


class GoldOraclePipeline(OnlinePipeline):
    """Appends a test-only gold-match indicator feature."""

    def __init__(self, *args, gold, **kwargs):
        super().__init__(*args, **kwargs)
        self.gold = gold

    def features(self, bundle, cluster):
        base = super().features(bundle, cluster)
        match = self.gold[bundle.doc_id] == self.gold[cluster.members[0]]
        return np.append(base, 1.0 if match else 0.0)


class OracleRanker:
    def score(self, features):
        return float(features[-1])


class OracleCreator:
    def decide_create(self, features):
        return features[-1] < 0.5


class TestGoldOracleStream:
    def test_reproduces_gold_exactly(self):
        corpus = stream_corpus(n_events=5, docs_per_event=6, seed=13)
        model = tiny_model()
        vocab = build_vocabulary(corpus)
        gold = {d.id: d.gold_event for d in corpus.documents}
        pipeline = GoldOraclePipeline(model, vocab, corpus.epoch,
                                      OracleRanker(), OracleCreator(), gold=gold)
        events = pipeline.process_stream(corpus.documents)
        pred = {e["doc_id"]: e["cluster_id"] for e in events}
        assert bcubed(pred, gold) == (1.0, 1.0, 1.0)
        assert len(pipeline.pool) == len(set(gold.values()))


class TestMakeRankerExamples:
    def test_all_new_events_zero_pairs(self):
        docs = [make_doc(f"d{i}", body=f"uniq{i} text{i}", when=utc(2014, 1, 1 + i),
                         event=f"ev{i}") for i in range(4)]
        corpus = corpus_of(docs)
        model = tiny_model()
        vocab = build_vocabulary(corpus)
        assert make_ranker_examples(corpus, vocab, model) == []

    def test_interleaved_two_event_count_matches_hand_replay(self):
        # A B A B A B: docs 3..6 each contribute exactly one pair -> 4
        docs = []
        for i in range(6):
            event = "A" if i % 2 == 0 else "B"
            docs.append(make_doc(f"d{i}", body=f"{event.lower()} story words",
                                 when=utc(2014, 1, 1 + i), event=event))
        corpus = corpus_of(docs)
        model = tiny_model()
        vocab = build_vocabulary(corpus)
        pairs = make_ranker_examples(corpus, vocab, model)
        assert len(pairs) == 4

    def test_pair_features_are_eleven_wide(self):
        corpus = stream_corpus(n_events=3, docs_per_event=3, seed=14)
        model = tiny_model()
        vocab = build_vocabulary(corpus)
        pairs = make_ranker_examples(corpus, vocab, model)
        assert pairs
        for pos, neg in pairs:
            assert pos.shape == (11,) and neg.shape == (11,)


class TestTrainRanker:
    def test_pair_hinge_arithmetic(self):
        # s_pos - s_neg = 0.5 under unit weight on one feature
        pos = np.zeros(11)
        pos[0] = 0.8
        neg = np.zeros(11)
        neg[0] = 0.3
        ranker = RankerModel(weights=np.eye(11)[0])
        assert ranking_loss([(pos, neg)], ranker, margin=0.1) == 0.0
        assert ranking_loss([(pos, neg)], ranker, margin=0.6) == pytest.approx(0.1)

    def test_separable_pairs_reach_zero_loss_and_full_accuracy(self):
        rng = np.random.default_rng(15)
        pairs = []
        for _ in range(40):
            direction = rng.normal(size=11)
            base = rng.normal(size=11)
            pairs.append((base + np.abs(direction) * 0 + np.full(11, 0.4), base - 0.4))
        ranker = train_ranker(pairs, margin=0.1, seed=0)
        assert ranking_loss(pairs, ranker, margin=0.1) == 0.0
        accuracy = np.mean([ranker.score(p) > ranker.score(n) for p, n in pairs])
        assert accuracy == 1.0

    def test_identical_pos_neg_features_keep_loss_at_margin(self):
        f = np.full(11, 0.5)
        pairs = [(f, f.copy())] * 6
        ranker = train_ranker(pairs, margin=0.3, seed=0)
        assert ranking_loss(pairs, ranker, margin=0.3) == pytest.approx(0.3)

    def test_empty_pairs_rejected(self):
        with pytest.raises(ValueError, match="no ranking pairs"):
            train_ranker([])

    def test_deterministic(self):
        rng = np.random.default_rng(16)
        pairs = [(rng.normal(size=11), rng.normal(size=11)) for _ in range(20)]
        a = train_ranker(pairs, seed=3)
        b = train_ranker(pairs, seed=3)
        assert a.weights.tobytes() == b.weights.tobytes()


class TestMakeCreationExamples:
    def test_balanced_exact_counts(self):
        corpus = stream_corpus(n_events=5, docs_per_event=5, seed=17)
        model = tiny_model()
        vocab = build_vocabulary(corpus)
        ranker = RankerModel(weights=np.full(11, 1.0))
        X, y, stats = make_creation_examples(corpus, vocab, model, ranker, seed=0)
        assert stats["balanced"]
        assert int((y == 1).sum()) == int((y == 0).sum())

    def test_all_new_stream_warns_and_emits_single_class(self):
        docs = [make_doc(f"d{i}", body=f"unique{i} tokens{i}", when=utc(2014, 1, 1 + i),
                         event=f"ev{i}") for i in range(4)]
        corpus = corpus_of(docs)
        model = tiny_model()
        vocab = build_vocabulary(corpus)
        ranker = RankerModel(weights=np.full(11, 1.0))
        with pytest.warns(UserWarning, match="single-class"):
            X, y, stats = make_creation_examples(corpus, vocab, model, ranker)
        assert not stats["balanced"]
        assert set(y.tolist()) == {1}

    def test_five_percent_new_event_share(self):
        # 20 events x 20 docs = 400 docs; 20 first-docs; one has an empty pool
        corpus = stream_corpus(n_events=20, docs_per_event=20, seed=18)
        model = tiny_model()
        vocab = build_vocabulary(corpus)
        ranker = RankerModel(weights=np.full(11, 1.0))
        _, _, stats = make_creation_examples(corpus, vocab, model, ranker, seed=0)
        assert stats["positive_share"] == pytest.approx(19 / 399, abs=1e-9)
        assert stats["positive_share"] == pytest.approx(0.05, abs=0.01)


class TestTrainCreationModel:
    def test_separable_reaches_full_accuracy(self):
        rng = np.random.default_rng(19)
        X = np.vstack([rng.normal(2.0, 0.3, size=(30, 11)),
                       rng.normal(-2.0, 0.3, size=(30, 11))])
        y = np.array([1] * 30 + [0] * 30)
        model = train_creation_model(X, y, seed=0)
        pred = [model.decide_create(x) for x in X]
        assert pred == [bool(v) for v in y]

    def test_mirrored_classes_give_near_zero_bias(self):
        rng = np.random.default_rng(20)
        pos = rng.normal(size=(40, 11)) + 0.7
        X = np.vstack([pos, -pos])
        y = np.array([1] * 40 + [0] * 40)
        model = train_creation_model(X, y, seed=0)
        assert abs(model.bias) < 1e-3

    def test_single_class_rejected(self):
        X = np.ones((5, 11))
        with pytest.raises(ValueError, match="both classes"):
            train_creation_model(X, np.ones(5))

    def test_deterministic(self):
        rng = np.random.default_rng(21)
        X = rng.normal(size=(30, 11))
        y = (rng.uniform(size=30) > 0.5).astype(int)
        if len(set(y.tolist())) < 2:
            y[0] = 1 - y[0]
        a = train_creation_model(X, y, seed=5)
        b = train_creation_model(X, y, seed=5)
        assert a.weights.tobytes() == b.weights.tobytes() and a.bias == b.bias


class TestEndToEndTrained:
    def test_trained_pipeline_recovers_separable_stream(self):
        corpus = stream_corpus(n_events=8, docs_per_event=8, seed=22)
        model = tiny_model()
        vocab = build_vocabulary(corpus)
        pairs = make_ranker_examples(corpus, vocab, model)
        ranker = train_ranker(pairs, seed=0)
        X, y, _ = make_creation_examples(corpus, vocab, model, ranker, seed=0)
        creator = train_creation_model(X, y, seed=0)
        pipeline = OnlinePipeline(model, vocab, corpus.epoch, ranker, creator)
        events = pipeline.process_stream(corpus.documents)
        pred = {e["doc_id"]: e["cluster_id"] for e in events}
        gold = {d.id: d.gold_event for d in corpus.documents}
        _, _, f1 = bcubed(pred, gold)
        assert f1 >= 0.9


class TestSnapshots:
    def test_resume_identical_to_uninterrupted(self, tmp_path):
        corpus = stream_corpus(n_events=4, docs_per_event=5, seed=23)
        model = tiny_model()
        vocab = build_vocabulary(corpus)
        ranker = RankerModel(weights=np.full(11, 0.5), bias=0.0)
        creator = CreationModel(weights=np.full(11, -1.0), bias=5.0)

        full = OnlinePipeline(model, vocab, corpus.epoch, ranker, creator)
        full_events = full.process_stream(corpus.documents)

        half = OnlinePipeline(model, vocab, corpus.epoch, ranker, creator)
        cut = len(corpus) // 2
        first_half = half.process_stream(corpus.documents[:cut])
        path = tmp_path / "pool.json"
        save_pool(half.pool, path, cut, corpus.epoch)

        pool, processed, epoch = load_pool(path)
        assert processed == cut and epoch == corpus.epoch
        resumed = OnlinePipeline(model, vocab, epoch, ranker, creator)
        resumed.pool = pool
        resumed.last_timestamp = corpus.documents[cut - 1].timestamp
        second_half = resumed.process_stream(corpus.documents[cut:])

        assert first_half + second_half == full_events
        assert sorted(resumed.pool.clusters) == sorted(full.pool.clusters)
        for cid in full.pool.clusters:
            a, b = full.pool.clusters[cid], resumed.pool.clusters[cid]
            assert a.members == b.members
            np.testing.assert_array_equal(a.dense_centroid, b.dense_centroid)
            assert a.newest_timestamp == b.newest_timestamp
            for key in SUBVECTOR_KEYS:
                assert a._sums[key] == b._sums[key]
