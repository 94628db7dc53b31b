"""Fine-tuning on the event-similarity task with triplet loss.

Mining regimes: within-batch ``batch_hard``, ``batch_all``,
``batch_semi_hard`` and ``batch_hard_soft_margin`` (batch-hard pairs under a
softplus loss), plus four offline regimes that pick the easiest/hardest
positive and negative per anchor over the full epoch embedding table
(``epen``, ``ephn``, ``hpen``, ``hphn``).

Similarity is cosine throughout; "hard" positives are the least similar,
"hard" negatives the most similar.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import IO, Sequence

import numpy as np

from .corpus import Corpus, timestep
from .fusion import FusionModel

ONLINE_REGIMES = ("batch_hard", "batch_all", "batch_semi_hard", "batch_hard_soft_margin")
OFFLINE_REGIMES = ("epen", "ephn", "hpen", "hphn")
MINING_REGIMES = ONLINE_REGIMES + OFFLINE_REGIMES


@dataclass(frozen=True)
class Triplet:
    """Indices of anchor, positive and negative rows in the embedding table
    the miner was given."""

    anchor: int
    positive: int
    negative: int


@dataclass
class TrainConfig:
    margin: float = 0.5
    batch_size: int = 32
    p_events: int = 4  # events per batch (PK sampling)
    k_docs: int = 8    # docs per event per batch
    epochs: int = 3
    lr: float = 1e-3
    mining: str = "batch_hard"
    seed: int = 0

    def __post_init__(self):
        if self.mining not in MINING_REGIMES:
            raise ValueError(f"unknown mining regime {self.mining!r}")
        if self.margin < 0:
            raise ValueError("margin must be non-negative")
        if not 1 <= self.epochs <= 5:
            raise ValueError("epochs must be between 1 and 5")


def cosine_sim(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine similarity undefined for zero vectors")
    return float(u @ v) / float(nu * nv)


def triplet_loss(e_a: np.ndarray, e_p: np.ndarray, e_n: np.ndarray, m: float) -> float:
    """max(0, sim(a,n) - sim(a,p) + m)."""
    return max(0.0, cosine_sim(e_a, e_n) - cosine_sim(e_a, e_p) + m)


def soft_margin_loss(e_a: np.ndarray, e_p: np.ndarray, e_n: np.ndarray, m: float) -> float:
    """log(1 + exp(sim(a,n) - sim(a,p) + m)), the smooth hinge."""
    return float(np.logaddexp(0.0, cosine_sim(e_a, e_n) - cosine_sim(e_a, e_p) + m))


def _similarity_matrix(emb: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(emb, axis=1)
    if np.any(norms == 0.0):
        raise ValueError("zero-norm embedding in batch")
    unit = emb / norms[:, None]
    return unit @ unit.T


def mine_batch(embeddings: np.ndarray, labels: Sequence, mining: str,
               margin: float = 0.5) -> list[Triplet]:
    """Select triplets from a batch (or from the full epoch table for the
    offline regimes). Anchors with no positive or no negative are skipped.

    Ties break toward the lowest index.
    """
    if mining not in MINING_REGIMES:
        raise ValueError(f"unknown mining regime {mining!r}")
    labels = np.asarray(labels)
    n = len(labels)
    sim = _similarity_matrix(embeddings)
    same = labels[:, None] == labels[None, :]
    triplets: list[Triplet] = []

    for a in range(n):
        pos = np.flatnonzero(same[a] & (np.arange(n) != a))
        neg = np.flatnonzero(~same[a])
        if len(pos) == 0 or len(neg) == 0:
            continue
        if mining == "batch_all":
            for p in pos:
                for ng in neg:
                    triplets.append(Triplet(a, int(p), int(ng)))
        elif mining == "batch_semi_hard":
            for p in pos:
                s_ap = sim[a, p]
                for ng in neg:
                    if s_ap - margin < sim[a, ng] < s_ap:
                        triplets.append(Triplet(a, int(p), int(ng)))
        elif mining in ("batch_hard", "batch_hard_soft_margin", "hphn"):
            p = pos[int(np.argmin(sim[a, pos]))]
            ng = neg[int(np.argmax(sim[a, neg]))]
            triplets.append(Triplet(a, int(p), int(ng)))
        elif mining == "epen":
            p = pos[int(np.argmax(sim[a, pos]))]
            ng = neg[int(np.argmin(sim[a, neg]))]
            triplets.append(Triplet(a, int(p), int(ng)))
        elif mining == "ephn":
            p = pos[int(np.argmax(sim[a, pos]))]
            ng = neg[int(np.argmax(sim[a, neg]))]
            triplets.append(Triplet(a, int(p), int(ng)))
        elif mining == "hpen":
            p = pos[int(np.argmin(sim[a, pos]))]
            ng = neg[int(np.argmin(sim[a, neg]))]
            triplets.append(Triplet(a, int(p), int(ng)))
    return triplets


def _d_cosine(u: np.ndarray, v: np.ndarray):
    """Gradients of cos(u, v) w.r.t. u and v."""
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    cos = float(u @ v) / float(nu * nv)
    du = v / (nu * nv) - cos * u / (nu * nu)
    dv = u / (nu * nv) - cos * v / (nv * nv)
    return du, dv, cos


def triplet_grads(e_a, e_p, e_n, m: float, soft: bool = False):
    """Loss value and gradients w.r.t. the three embeddings."""
    da_n, dn, s_an = _d_cosine(e_a, e_n)
    da_p, dp, s_ap = _d_cosine(e_a, e_p)
    arg = s_an - s_ap + m
    if soft:
        loss = float(np.logaddexp(0.0, arg))
        w = 1.0 / (1.0 + np.exp(-arg))
    else:
        loss = max(0.0, arg)
        w = 1.0 if arg > 0 else 0.0
    g_a = w * (da_n - da_p)
    g_p = -w * dp
    g_n = w * dn
    return loss, g_a, g_p, g_n


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        for name, p in params.items():
            g = grads[name]
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            m_hat = m / (1 - self.beta1 ** self.t)
            v_hat = v / (1 - self.beta2 ** self.t)
            p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class TrainResult:
    model: FusionModel
    history: list[tuple[int, int, float]] = field(default_factory=list)  # (epoch, batch, loss)

    def epoch_means(self) -> list[float]:
        by_epoch: dict[int, list[float]] = {}
        for epoch, _, loss in self.history:
            by_epoch.setdefault(epoch, []).append(loss)
        return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]


def _pk_batches(events: dict, rng: np.random.Generator, p_events: int, k_docs: int):
    """Event-stratified batches: P events x K docs, cycling through a
    shuffled event order; events short of K docs are sampled with
    replacement."""
    names = sorted(events)
    order = list(rng.permutation(len(names)))
    batches = []
    for start in range(0, len(order), p_events):
        chosen = order[start:start + p_events]
        if len(chosen) < 2:  # a batch needs >= 2 events for negatives
            break
        batch = []
        for ei in chosen:
            docs = events[names[ei]]
            if len(docs) >= k_docs:
                picks = rng.choice(len(docs), size=k_docs, replace=False)
            else:
                picks = rng.choice(len(docs), size=k_docs, replace=True)
            batch.extend(docs[i] for i in picks)
        batches.append(batch)
    return batches


def train(model: FusionModel, corpus: Corpus, config: TrainConfig) -> TrainResult:
    """Fine-tune the fusion model; deterministic given ``config.seed``.

    Keeps the parameters from the epoch with the lowest mean training loss.
    """
    if not corpus.has_gold():
        raise ValueError("training corpus must carry gold event labels")
    events: dict[str, list[int]] = {}
    for i, doc in enumerate(corpus.documents):
        events.setdefault(doc.gold_event, []).append(i)
    if len(events) < 2:
        raise ValueError("training needs at least two distinct events")

    g = model.time_config.granularity
    steps = [timestep(d.timestamp, corpus.epoch, g) for d in corpus.documents]
    labels_all = np.array([d.gold_event for d in corpus.documents])
    rng = np.random.default_rng(config.seed)
    optimizer = Adam(lr=config.lr)
    soft = config.mining == "batch_hard_soft_margin"
    offline = config.mining in OFFLINE_REGIMES

    history: list[tuple[int, int, float]] = []
    best_mean = np.inf
    best_params = None

    for epoch in range(config.epochs):
        if offline:
            table = np.stack([
                model.embed_at(corpus.documents[i], steps[i]) for i in range(len(corpus))
            ])
            mined = mine_batch(table, labels_all, config.mining, config.margin)
            order = rng.permutation(len(mined))
            batches = [
                [mined[j] for j in order[s:s + config.batch_size]]
                for s in range(0, len(order), config.batch_size)
            ]
            doc_batches = None
        else:
            doc_batches = _pk_batches(events, rng, config.p_events, config.k_docs)
            batches = None

        n_batches = len(batches) if offline else len(doc_batches)
        epoch_losses = []
        for b in range(n_batches):
            if offline:
                triplets = batches[b]
                idx = sorted({i for t in triplets for i in (t.anchor, t.positive, t.negative)})
            else:
                idx = doc_batches[b]
            fwd = {}
            for i in idx:
                fwd[i] = model.forward_cached(corpus.documents[i], steps[i])
            if not offline:
                emb = np.stack([fwd[i][0] for i in idx])
                local = mine_batch(emb, labels_all[idx], config.mining, config.margin)
                triplets = [Triplet(idx[t.anchor], idx[t.positive], idx[t.negative])
                            for t in local]

            if not triplets:
                history.append((epoch, b, 0.0))
                epoch_losses.append(0.0)
                continue

            d_ef = {i: np.zeros(model.d_model) for i in
                    {i for t in triplets for i in (t.anchor, t.positive, t.negative)}}
            total = 0.0
            scale = 1.0 / len(triplets)
            for t in triplets:
                loss, g_a, g_p, g_n = triplet_grads(
                    fwd[t.anchor][0], fwd[t.positive][0], fwd[t.negative][0],
                    config.margin, soft=soft)
                total += loss
                d_ef[t.anchor] += scale * g_a
                d_ef[t.positive] += scale * g_p
                d_ef[t.negative] += scale * g_n

            grads = model.zero_grads()
            for i, grad in d_ef.items():
                if np.any(grad):
                    model.backward_into(fwd[i][1], grad, grads)
            optimizer.step(model.parameters(), grads)

            mean_loss = total / len(triplets)
            history.append((epoch, b, float(mean_loss)))
            epoch_losses.append(mean_loss)

        epoch_mean = float(np.mean(epoch_losses)) if epoch_losses else np.inf
        if epoch_mean < best_mean:
            best_mean = epoch_mean
            best_params = {k: v.copy() for k, v in model.parameters().items()}

    if best_params is not None:
        live = model.parameters()
        for name, value in best_params.items():
            live[name][...] = value
    return TrainResult(model=model, history=history)


def write_loss_csv(history: Sequence[tuple[int, int, float]], handle: IO[str]) -> None:
    handle.write("epoch,batch,loss\n")
    for epoch, batch, loss in history:
        handle.write(f"{epoch},{batch},{loss:.12g}\n")
