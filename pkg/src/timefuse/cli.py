"""Command-line surface.

One binary with subcommands covering the full workflow: ingest a corpus,
fine-tune the fusion encoder, embed, cluster retrospectively, train the
online models, run the stream, evaluate, and probe time sensitivity.

Options come from a JSON config file (``--config``) overridden by flags;
flags win. Exit codes: 0 ok, 1 runtime failure, 2 usage error. Output files
are written atomically (temp + rename).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import tempfile

import numpy as np

from . import online_pipeline as op
from .corpus import (
    Corpus,
    CorpusError,
    Granularity,
    load_corpus,
    save_corpus,
    sort_chronological,
)
from .evaluation import evaluate, render_table
from .features import build_vocabulary, load_vocabulary, save_vocabulary
from .fusion import FusionModel, load_model, save_model
from .ioutil import atomic_write
from .retro_clustering import gac, hdbscan, kmeans, load_assignment, save_clustering
from .text_encoder import HashedRandomBackend, ToyTrainableBackend, load_precomputed
from .time_encoding import TimeEncoder, TimeEncoderConfig, probe_similarity, write_probe_csv
from .training import TrainConfig, train, write_loss_csv


class UsageError(Exception):
    """Bad invocation (missing/invalid flags); exits with code 2."""


@dataclasses.dataclass
class RunConfig:
    """Every knob with its default; unknown config keys are rejected."""

    corpus: str | None = None
    model: str | None = None
    output: str | None = None
    seed: int = 0
    # encoder
    backend: str = "toy"             # toy | hashed | precomputed
    teb1: str | None = None
    d_model: int = 64
    n_buckets: int = 65536
    max_seq_len: int = 230
    strategy: str = "CM"
    n_heads: int = 4
    time_method: str = "sinpe"
    granularity: str = "daily"
    max_position: int = 2048
    # training
    margin: float = 0.5
    batch_size: int = 32
    p_events: int = 4
    k_docs: int = 8
    epochs: int = 3
    lr: float = 1e-3
    mining: str = "batch_hard"
    # features / online
    sigma_days: float = 3.0
    vocab_limit: int = 50000
    vocab: str | None = None
    ranker: str | None = None
    creator: str | None = None
    snapshot: str | None = None
    stop_after: int | None = None
    resume: bool = False
    sort: bool = False
    # retrospective clustering
    algo: str = "hdbscan"
    k: int | None = None
    min_cluster_size: int = 5
    min_samples: int | None = None
    bucket_days: float = 30.0
    metric: str = "cosine"
    # evaluation / probing
    assignments: str | None = None
    report: str | None = None
    loss_csv: str | None = None
    doc_id: str | None = None
    days: int = 1000

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as handle:
            raw = json.load(handle)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**raw)

    def override(self, args: argparse.Namespace) -> "RunConfig":
        updates = {}
        for f in dataclasses.fields(self):
            value = getattr(args, f.name, None)
            if value is not None:
                updates[f.name] = value
        return dataclasses.replace(self, **updates)


def _require(config: RunConfig, name: str) -> str:
    value = getattr(config, name)
    if value is None:
        raise UsageError(f"missing required option --{name.replace('_', '-')}")
    return value


def _build_backend(config: RunConfig):
    if config.backend == "hashed":
        return HashedRandomBackend(config.d_model, seed=config.seed)
    if config.backend == "toy":
        return ToyTrainableBackend(config.d_model, n_buckets=config.n_buckets,
                                   seed=config.seed)
    if config.backend == "precomputed":
        backend = load_precomputed(_require(config, "teb1"), seed=config.seed)
        backend.source_path = config.teb1
        return backend
    raise UsageError(f"unknown backend {config.backend!r}")


def _build_model(config: RunConfig) -> FusionModel:
    backend = _build_backend(config)
    tc = TimeEncoderConfig(
        method=config.time_method, d_model=backend.d_model,
        max_position=config.max_position,
        granularity=Granularity.parse(config.granularity))
    encoder = TimeEncoder(tc, rng=np.random.default_rng([config.seed, 0x71E]))
    return FusionModel(backend, encoder, strategy=config.strategy,
                       n_heads=config.n_heads, seed=config.seed,
                       max_seq_len=config.max_seq_len)


def _load_sorted_corpus(config: RunConfig) -> Corpus:
    corpus = load_corpus(_require(config, "corpus"))
    return sort_chronological(corpus)


def cmd_ingest(config: RunConfig) -> int:
    corpus = _load_sorted_corpus(config)
    out = _require(config, "output")
    with atomic_write(out) as handle:
        save_corpus(corpus, handle)
    print(f"ingested {len(corpus)} documents; epoch {corpus.epoch.isoformat()}")
    return 0


def cmd_train_encoder(config: RunConfig) -> int:
    corpus = _load_sorted_corpus(config)
    model = _build_model(config)
    tc = TrainConfig(margin=config.margin, batch_size=config.batch_size,
                     p_events=config.p_events, k_docs=config.k_docs,
                     epochs=config.epochs, lr=config.lr, mining=config.mining,
                     seed=config.seed)
    result = train(model, corpus, tc)
    save_model(model, _require(config, "model"))
    if config.loss_csv:
        with atomic_write(config.loss_csv) as handle:
            write_loss_csv(result.history, handle)
    means = ", ".join(f"{m:.4f}" for m in result.epoch_means())
    print(f"trained {config.epochs} epochs (mean loss per epoch: {means}); "
          f"model -> {config.model}")
    return 0


def cmd_embed(config: RunConfig) -> int:
    corpus = _load_sorted_corpus(config)
    model = load_model(_require(config, "model"))
    X = model.embed_corpus(corpus)
    out = _require(config, "output")
    # np.savez appends .npz to names without it, so the temp file must end that way
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(out)) or ".",
                               suffix=".tmp.npz")
    os.close(fd)
    try:
        np.savez(tmp, ids=np.array([d.id for d in corpus.documents]), embeddings=X)
        os.replace(tmp, out)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    print(f"embedded {len(corpus)} documents -> {out}")
    return 0


def _maybe_report(config: RunConfig, corpus: Corpus, assignment: dict[str, int],
                  extra: dict | None = None) -> None:
    if not corpus.has_gold():
        return
    gold = {d.id: d.gold_event for d in corpus.documents}
    report = evaluate(assignment, gold)
    payload = report.to_dict()
    payload["seed"] = config.seed
    if extra:
        payload.update(extra)
    print(render_table(report))
    if config.report:
        with atomic_write(config.report) as handle:
            json.dump(payload, handle, indent=2)
            handle.write("\n")


def cmd_cluster_retro(config: RunConfig) -> int:
    corpus = _load_sorted_corpus(config)
    model = load_model(_require(config, "model"))
    X = model.embed_corpus(corpus)
    ids = [d.id for d in corpus.documents]
    if config.algo == "kmeans":
        if config.k is None:
            raise UsageError("--k is required for kmeans")
        result = kmeans(X, config.k, seed=config.seed, ids=ids, metric=config.metric)
    elif config.algo == "gac":
        if config.k is None:
            raise UsageError("--k is required for gac")
        result = gac(X, config.k, [d.timestamp for d in corpus.documents],
                     bucket_days=config.bucket_days, ids=ids, metric=config.metric)
    elif config.algo == "hdbscan":
        result = hdbscan(X, min_cluster_size=config.min_cluster_size,
                         min_samples=config.min_samples, ids=ids, metric=config.metric)
    else:
        raise UsageError(f"unknown algorithm {config.algo!r}")
    if config.assignments:
        save_clustering(result, config.assignments)
    print(f"{result.algorithm}: {result.cn} clusters"
          + (f", {result.n_noise} noise points" if result.raw_labels is not None else ""))
    _maybe_report(config, corpus, result.assignment,
                  extra={"algorithm": result.algorithm, "CN_predicted": result.cn,
                         "n_noise": result.n_noise})
    return 0


def cmd_train_online(config: RunConfig) -> int:
    corpus = _load_sorted_corpus(config)
    model = load_model(_require(config, "model"))
    vocab = build_vocabulary(corpus, limit=config.vocab_limit)
    save_vocabulary(vocab, _require(config, "vocab"))
    pairs = op.make_ranker_examples(corpus, vocab, model, sigma_days=config.sigma_days)
    ranker = op.train_ranker(pairs, seed=config.seed)
    X, y, stats = op.make_creation_examples(corpus, vocab, model, ranker,
                                            sigma_days=config.sigma_days, seed=config.seed)
    creator = op.train_creation_model(X, y, seed=config.seed)
    save_linear_model(ranker, _require(config, "ranker"))
    save_linear_model(creator, _require(config, "creator"))
    print(f"ranker trained on {len(pairs)} pairs; creation model on {len(y)} examples "
          f"(pre-balance positive share {stats['positive_share']:.3f})")
    return 0


def save_linear_model(model, path) -> None:
    payload = {"weights": model.weights.tolist(), "bias": model.bias}
    if isinstance(model, op.CreationModel):
        payload["threshold"] = model.threshold
    with atomic_write(path) as handle:
        json.dump(payload, handle)
        handle.write("\n")


def load_ranker(path) -> op.RankerModel:
    with open(path, encoding="utf-8") as handle:
        raw = json.load(handle)
    return op.RankerModel(weights=np.array(raw["weights"]), bias=float(raw["bias"]))


def load_creator(path) -> op.CreationModel:
    with open(path, encoding="utf-8") as handle:
        raw = json.load(handle)
    return op.CreationModel(weights=np.array(raw["weights"]), bias=float(raw["bias"]),
                            threshold=float(raw.get("threshold", 0.5)))


def cmd_run_online(config: RunConfig) -> int:
    corpus_path = _require(config, "corpus")
    try:
        corpus = load_corpus(corpus_path)
    except CorpusError as exc:
        if "empty corpus" in str(exc):
            # degenerate stream: emit empty assignments and a flagged report
            if config.assignments:
                with atomic_write(config.assignments) as handle:
                    handle.write("")
            if config.report:
                with atomic_write(config.report) as handle:
                    json.dump({"metrics": {}, "CN": 0, "flags": ["empty corpus"],
                               "seed": config.seed}, handle, indent=2)
                    handle.write("\n")
            print("empty corpus: no documents processed")
            return 0
        raise
    if config.sort:
        corpus = sort_chronological(corpus)
    else:
        stamps = [d.timestamp for d in corpus.documents]
        if any(b < a for a, b in zip(stamps, stamps[1:])):
            raise CorpusError("corpus is not in timestamp order (pass --sort to sort)")

    model = load_model(_require(config, "model"))
    vocab = load_vocabulary(_require(config, "vocab"))
    ranker = load_ranker(_require(config, "ranker"))
    creator = load_creator(_require(config, "creator"))

    start = 0
    pipeline = op.OnlinePipeline(model, vocab, corpus.epoch, ranker, creator,
                                 sigma_days=config.sigma_days)
    if config.resume:
        if not config.snapshot or not os.path.exists(config.snapshot):
            raise UsageError("--resume needs an existing --snapshot file")
        pool, start, epoch = op.load_pool(config.snapshot)
        pipeline.pool = pool
        pipeline.epoch = epoch
        if start > 0:
            pipeline.last_timestamp = corpus.documents[start - 1].timestamp

    events = _reconstruct_events(pipeline.pool, corpus, start)
    limit = len(corpus) if config.stop_after is None else min(config.stop_after, len(corpus))
    for i in range(start, limit):
        events.append(pipeline.process_document(corpus.documents[i]))

    if config.assignments:
        with atomic_write(config.assignments) as handle:
            op.write_stream_events(events, handle)
    if config.snapshot:
        op.save_pool(pipeline.pool, config.snapshot, limit, pipeline.epoch)
    print(f"processed {limit - start} documents; pool holds {len(pipeline.pool)} clusters")
    if limit == len(corpus):
        _maybe_report(config, corpus, {e["doc_id"]: e["cluster_id"] for e in events},
                      extra={"CN_predicted": len(pipeline.pool)})
    return 0


def _reconstruct_events(pool: op.ClusterPool, corpus: Corpus, count: int) -> list[dict]:
    """Rebuild the assignment events for the first ``count`` documents from a
    snapshot's member lists, so a resumed run emits the full stream."""
    if count == 0:
        return []
    member_of = {}
    first_member = {}
    for cid, cluster in pool.clusters.items():
        for j, doc_id in enumerate(cluster.members):
            member_of[doc_id] = cid
            if j == 0:
                first_member[doc_id] = cid
    events = []
    for doc in corpus.documents[:count]:
        if doc.id not in member_of:
            raise CorpusError(f"snapshot does not cover document {doc.id!r}")
        cid = member_of[doc.id]
        events.append({"doc_id": doc.id, "cluster_id": cid,
                       "created": first_member.get(doc.id) == cid})
    return events


def cmd_evaluate(config: RunConfig) -> int:
    corpus = load_corpus(_require(config, "corpus"))
    if not corpus.has_gold():
        raise CorpusError("evaluation corpus must carry gold event labels")
    assignment = load_assignment(_require(config, "assignments"))
    gold = {d.id: d.gold_event for d in corpus.documents}
    missing = set(gold) - set(assignment)
    if missing:
        raise CorpusError(f"assignments missing {len(missing)} documents")
    report = evaluate({i: assignment[i] for i in gold}, gold)
    print(render_table(report))
    if config.report:
        payload = report.to_dict()
        payload["seed"] = config.seed
        with atomic_write(config.report) as handle:
            json.dump(payload, handle, indent=2)
            handle.write("\n")
    return 0


def cmd_probe_time(config: RunConfig) -> int:
    corpus = load_corpus(_require(config, "corpus"))
    model = load_model(_require(config, "model"))
    doc_id = _require(config, "doc_id")
    doc = corpus.by_id().get(doc_id)
    if doc is None:
        raise CorpusError(f"unknown document id {doc_id!r}")
    series = probe_similarity(model, doc, range(config.days + 1), corpus.epoch)
    out = _require(config, "output")
    with atomic_write(out) as handle:
        write_probe_csv(series, handle)
    print(f"probed {len(series)} offsets -> {out}")
    return 0


COMMANDS = {
    "ingest": cmd_ingest,
    "train-encoder": cmd_train_encoder,
    "embed": cmd_embed,
    "cluster-retro": cmd_cluster_retro,
    "train-online": cmd_train_online,
    "run-online": cmd_run_online,
    "evaluate": cmd_evaluate,
    "probe-time": cmd_probe_time,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="timefuse",
                                     description="time-aware news event detection")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file; flags override it")
        p.add_argument("--corpus")
        p.add_argument("--model")
        p.add_argument("--output")
        p.add_argument("--seed", type=int)
        p.add_argument("--backend", choices=["toy", "hashed", "precomputed"])
        p.add_argument("--teb1")
        p.add_argument("--d-model", dest="d_model", type=int)
        p.add_argument("--n-buckets", dest="n_buckets", type=int)
        p.add_argument("--max-seq-len", dest="max_seq_len", type=int)
        p.add_argument("--strategy", choices=["A", "AM", "CM", "ACM"])
        p.add_argument("--n-heads", dest="n_heads", type=int)
        p.add_argument("--time-method", dest="time_method",
                       choices=["sinpe", "learnpe", "time2vec", "zero"])
        p.add_argument("--granularity",
                       choices=["hourly", "daily", "bidaily", "weekly", "monthly"])
        p.add_argument("--max-position", dest="max_position", type=int)
        p.add_argument("--margin", type=float)
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--p-events", dest="p_events", type=int)
        p.add_argument("--k-docs", dest="k_docs", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--mining")
        p.add_argument("--sigma-days", dest="sigma_days", type=float)
        p.add_argument("--vocab-limit", dest="vocab_limit", type=int)
        p.add_argument("--vocab")
        p.add_argument("--ranker")
        p.add_argument("--creator")
        p.add_argument("--snapshot")
        p.add_argument("--stop-after", dest="stop_after", type=int)
        p.add_argument("--resume", action="store_const", const=True, default=None)
        p.add_argument("--sort", action="store_const", const=True, default=None)
        p.add_argument("--algo", choices=["kmeans", "gac", "hdbscan"])
        p.add_argument("--k", type=int)
        p.add_argument("--min-cluster-size", dest="min_cluster_size", type=int)
        p.add_argument("--min-samples", dest="min_samples", type=int)
        p.add_argument("--bucket-days", dest="bucket_days", type=float)
        p.add_argument("--metric", choices=["cosine", "euclidean"])
        p.add_argument("--assignments")
        p.add_argument("--report")
        p.add_argument("--loss-csv", dest="loss_csv")
        p.add_argument("--doc-id", dest="doc_id")
        p.add_argument("--days", type=int)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = RunConfig.from_file(args.config) if args.config else RunConfig()
        config = config.override(args)
        return COMMANDS[args.command](config)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (CorpusError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
