"""Time-text fusion: combine the token matrix and the tiled time embedding
into one document vector.

Four strategies, all ending in mean pooling over token positions:

* ``A``   — add the time row to every token row;
* ``AM``  — add, then self-attention at width d;
* ``CM``  — concatenate along features, attention at width 2d projects back
  to d (the default);
* ``ACM`` — concatenate, add the time row tiled twice, attention at 2d.

Forward passes cache enough to run exact analytic backward passes through
pooling, attention, the fusion arithmetic, the entity layer and the time
encoder (learned-table and Time2Vec parameters; sinusoidal encodings are
constant).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from datetime import datetime

import numpy as np

from .corpus import Corpus, Document, Granularity, timestep
from .ioutil import atomic_write
from .text_encoder import (
    DEFAULT_MAX_SEQ_LEN,
    EncoderBackend,
    HashedRandomBackend,
    PrecomputedBackend,
    ToyTrainableBackend,
    load_precomputed,
    tokenize,
)
from .time_encoding import TimeEncoder, TimeEncoderConfig

FUSION_STRATEGIES = ("A", "AM", "CM", "ACM")


@dataclass
class AttentionParams:
    """Per-head projections plus the shared output projection."""

    wq: np.ndarray  # (n_heads, width, d_head)
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray  # (n_heads * d_head, d_model)

    @property
    def n_heads(self) -> int:
        return self.wq.shape[0]

    @property
    def width(self) -> int:
        return self.wq.shape[1]

    @classmethod
    def init(cls, width: int, d_model: int, n_heads: int,
             rng: np.random.Generator) -> "AttentionParams":
        if width % n_heads != 0:
            raise ValueError(f"attention width {width} not divisible by {n_heads} heads")
        d_head = width // n_heads
        shape = (n_heads, width, d_head)
        return cls(
            wq=rng.normal(0.0, 0.02, size=shape),
            wk=rng.normal(0.0, 0.02, size=shape),
            wv=rng.normal(0.0, 0.02, size=shape),
            wo=rng.normal(0.0, 0.02, size=(n_heads * d_head, d_model)),
        )


def build_time_matrix(te: np.ndarray, seq_len: int) -> np.ndarray:
    """The time embedding repeated once per token position."""
    if seq_len < 1:
        raise ValueError("seq_len must be >= 1")
    return np.tile(te, (seq_len, 1))


def _attention_forward(M: np.ndarray, params: AttentionParams):
    if M.shape[1] != params.width:
        raise ValueError(f"attention expects width {params.width}, got {M.shape[1]}")
    d_head = params.wq.shape[2]
    scale = 1.0 / np.sqrt(d_head)
    heads = []
    caches = []
    for h in range(params.n_heads):
        q = M @ params.wq[h]
        k = M @ params.wk[h]
        v = M @ params.wv[h]
        scores = (q @ k.T) * scale
        scores -= scores.max(axis=1, keepdims=True)
        attn = np.exp(scores)
        attn /= attn.sum(axis=1, keepdims=True)
        heads.append(attn @ v)
        caches.append((q, k, v, attn))
    H = np.concatenate(heads, axis=1)
    return H @ params.wo, (M, H, caches, scale)


def multi_head_attention(M: np.ndarray, params: AttentionParams) -> np.ndarray:
    """Scaled-dot-product self-attention per head, concatenated and
    output-projected back to d_model."""
    out, _ = _attention_forward(M, params)
    return out


def _attention_backward(cache, d_out: np.ndarray, params: AttentionParams):
    M, H, head_caches, scale = cache
    d_head = params.wq.shape[2]
    grads = {
        "wq": np.zeros_like(params.wq),
        "wk": np.zeros_like(params.wk),
        "wv": np.zeros_like(params.wv),
        "wo": H.T @ d_out,
    }
    dH = d_out @ params.wo.T
    dM = np.zeros_like(M)
    for h in range(params.n_heads):
        q, k, v, attn = head_caches[h]
        dHh = dH[:, h * d_head:(h + 1) * d_head]
        dAttn = dHh @ v.T
        dV = attn.T @ dHh
        dScores = (dAttn - (dAttn * attn).sum(axis=1, keepdims=True)) * attn
        dQ = (dScores * scale) @ k
        dK = (dScores * scale).T @ q
        grads["wq"][h] = M.T @ dQ
        grads["wk"][h] = M.T @ dK
        grads["wv"][h] = M.T @ dV
        dM += dQ @ params.wq[h].T + dK @ params.wk[h].T + dV @ params.wv[h].T
    return grads, dM


def _fusion_input(strategy: str, m_text: np.ndarray, m_time: np.ndarray) -> np.ndarray:
    if strategy in ("A", "AM"):
        return m_text + m_time
    if strategy == "CM":
        return np.concatenate([m_text, m_time], axis=1)
    if strategy == "ACM":
        return np.concatenate([m_text + m_time, 2.0 * m_time], axis=1)
    raise ValueError(f"unknown fusion strategy {strategy!r}")


def fuse(m_text: np.ndarray, m_time: np.ndarray, model: "FusionModel") -> np.ndarray:
    """Fused document embedding e_f of width d_model."""
    e_f, _ = fuse_forward(m_text, m_time, model)
    return e_f


def fuse_forward(m_text: np.ndarray, m_time: np.ndarray, model: "FusionModel"):
    if m_text.shape != m_time.shape:
        raise ValueError(f"text/time shape mismatch: {m_text.shape} vs {m_time.shape}")
    x = _fusion_input(model.strategy, m_text, m_time)
    if model.strategy == "A":
        return x.mean(axis=0), (x.shape[0], None)
    y, att_cache = _attention_forward(x, model.attention)
    return y.mean(axis=0), (x.shape[0], att_cache)


def fuse_backward(cache, d_ef: np.ndarray, model: "FusionModel"):
    """Gradients of the fused embedding: attention parameter grads (empty for
    strategy A) plus dM_text and dM_time."""
    seq_len, att_cache = cache
    d_rows = np.tile(d_ef / seq_len, (seq_len, 1))
    if model.strategy == "A":
        return {}, d_rows.copy(), d_rows.copy()
    att_grads, dx = _attention_backward(att_cache, d_rows, model.attention)
    d = model.d_model
    if model.strategy == "AM":
        return att_grads, dx.copy(), dx.copy()
    if model.strategy == "CM":
        return att_grads, dx[:, :d].copy(), dx[:, d:].copy()
    # ACM: x = [m_text + m_time, 2 m_time]
    return att_grads, dx[:, :d].copy(), dx[:, :d] + 2.0 * dx[:, d:]


class FusionModel:
    """Pluggable text backend + time encoder + fusion strategy."""

    def __init__(self, backend: EncoderBackend, time_encoder: TimeEncoder,
                 strategy: str = "CM", n_heads: int = 4, seed: int = 0,
                 max_seq_len: int = DEFAULT_MAX_SEQ_LEN):
        if strategy not in FUSION_STRATEGIES:
            raise ValueError(f"unknown fusion strategy {strategy!r}")
        if time_encoder.config.d_model != backend.d_model:
            raise ValueError("time embedding width must equal backend d_model")
        self.backend = backend
        self.time_encoder = time_encoder
        self.strategy = strategy
        self.max_seq_len = max_seq_len
        self.seed = seed
        if strategy == "A":
            self.attention = None
        else:
            width = backend.d_model if strategy == "AM" else 2 * backend.d_model
            rng = np.random.default_rng([seed, 0xA77])
            self.attention = AttentionParams.init(width, backend.d_model, n_heads, rng)

    @property
    def d_model(self) -> int:
        return self.backend.d_model

    @property
    def time_config(self) -> TimeEncoderConfig:
        return self.time_encoder.config

    # -- forward ----------------------------------------------------------

    def embed_at(self, doc: Document, step: int) -> np.ndarray:
        e_f, _ = self.forward_cached(doc, step)
        return e_f

    def embed_document(self, doc: Document, epoch: datetime) -> np.ndarray:
        return self.embed_at(doc, timestep(doc.timestamp, epoch, self.time_config.granularity))

    def embed_corpus(self, corpus: Corpus) -> np.ndarray:
        return np.stack([self.embed_document(d, corpus.epoch) for d in corpus.documents])

    def forward_cached(self, doc: Document, step: int):
        tokens = tokenize(doc, self.max_seq_len)
        m_text = self.backend.base_matrix(doc, tokens)
        for t in range(m_text.shape[0]):
            flagged = tokens[t].entity if t < len(tokens) else False
            m_text[t] += self.backend.entity_present if flagged else self.backend.entity_absent
        te = self.time_encoder.encode(step)
        m_time = build_time_matrix(te, m_text.shape[0])
        e_f, fuse_cache = fuse_forward(m_text, m_time, self)
        return e_f, (doc, tokens, step, fuse_cache)

    # -- backward ---------------------------------------------------------

    def parameters(self) -> dict[str, np.ndarray]:
        params = {f"backend.{k}": v for k, v in self.backend.parameters().items()}
        params.update({f"time.{k}": v for k, v in self.time_encoder.parameters().items()})
        if self.attention is not None:
            params.update({
                "att.wq": self.attention.wq,
                "att.wk": self.attention.wk,
                "att.wv": self.attention.wv,
                "att.wo": self.attention.wo,
            })
        return params

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {name: np.zeros_like(arr) for name, arr in self.parameters().items()}

    def backward_into(self, cache, d_ef: np.ndarray, grads: dict[str, np.ndarray]) -> None:
        """Accumulate gradients of a scalar loss (with upstream d_ef) into
        ``grads`` for every trainable tensor of the model."""
        doc, tokens, step, fuse_cache = cache
        att_grads, d_text, d_time = fuse_backward(fuse_cache, d_ef, self)
        for key, grad in att_grads.items():
            grads[f"att.{key}"] += grad
        backend_grads = {k: grads[f"backend.{k}"] for k in self.backend.parameters()}
        self.backend.backward(doc, tokens, d_text, backend_grads)
        time_grads = {k: grads[f"time.{k}"] for k in self.time_encoder.parameters()}
        if time_grads:
            self.time_encoder.backward(step, d_time.sum(axis=0), time_grads)


# ---------------------------------------------------------------------------
# Persistence: magic "TFM1", u32 version, u32 header length, JSON header,
# then parameter tensors as f64 little-endian in the header's declared order.
# ---------------------------------------------------------------------------

MODEL_MAGIC = b"TFM1"
MODEL_VERSION = 1


def _backend_header(backend: EncoderBackend) -> dict:
    header = {"kind": backend.kind, "d_model": backend.d_model}
    if isinstance(backend, HashedRandomBackend):
        header["seed"] = backend.seed
    elif isinstance(backend, ToyTrainableBackend):
        header.update(seed=backend.seed, n_buckets=backend.n_buckets)
    elif isinstance(backend, PrecomputedBackend):
        header["teb1_path"] = getattr(backend, "source_path", None)
    else:
        raise ValueError(f"cannot persist backend kind {backend.kind!r}")
    return header


def save_model(model: FusionModel, path) -> None:
    params = model.parameters()
    order = sorted(params)
    tc = model.time_config
    header = {
        "version": MODEL_VERSION,
        "strategy": model.strategy,
        "d_model": model.d_model,
        "n_heads": 0 if model.attention is None else model.attention.n_heads,
        "time": {
            "method": tc.method,
            "d_model": tc.d_model,
            "max_position": tc.max_position,
            "granularity": tc.granularity.name.lower(),
        },
        "backend": _backend_header(model.backend),
        "max_seq_len": model.max_seq_len,
        "seed": model.seed,
        "tensors": [{"name": name, "shape": list(params[name].shape)} for name in order],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with atomic_write(path, "wb") as handle:
        handle.write(MODEL_MAGIC)
        handle.write(struct.pack("<II", MODEL_VERSION, len(blob)))
        handle.write(blob)
        for name in order:
            handle.write(np.ascontiguousarray(params[name], dtype="<f8").tobytes())


def load_model(path) -> FusionModel:
    with open(path, "rb") as handle:
        if handle.read(4) != MODEL_MAGIC:
            raise ValueError(f"{path}: not a fusion model file")
        version, blob_len = struct.unpack("<II", handle.read(8))
        if version != MODEL_VERSION:
            raise ValueError(f"{path}: unsupported model format version {version}")
        header = json.loads(handle.read(blob_len).decode("utf-8"))
        tensors = {}
        for spec in header["tensors"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = handle.read(8 * count)
            if len(raw) != 8 * count:
                raise ValueError(f"{path}: truncated tensor {spec['name']!r}")
            tensors[spec["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()

    bk = header["backend"]
    if bk["kind"] == "hashed":
        backend: EncoderBackend = HashedRandomBackend(bk["d_model"], seed=bk["seed"])
    elif bk["kind"] == "toy":
        backend = ToyTrainableBackend(bk["d_model"], n_buckets=bk["n_buckets"], seed=bk["seed"])
    elif bk["kind"] == "precomputed":
        if not bk.get("teb1_path"):
            raise ValueError(f"{path}: precomputed model carries no TEB1 path")
        backend = load_precomputed(bk["teb1_path"])
    else:
        raise ValueError(f"{path}: unknown backend kind {bk['kind']!r}")

    tc = header["time"]
    config = TimeEncoderConfig(
        method=tc["method"], d_model=tc["d_model"], max_position=tc["max_position"],
        granularity=Granularity.parse(tc["granularity"]),
    )
    encoder = TimeEncoder(config)
    model = FusionModel(backend, encoder, strategy=header["strategy"],
                        n_heads=max(1, header["n_heads"]), seed=header.get("seed", 0),
                        max_seq_len=header["max_seq_len"])
    live = model.parameters()
    for name, value in tensors.items():
        target = live.get(name)
        if target is None:
            raise ValueError(f"{path}: unexpected tensor {name!r}")
        if target.shape != value.shape:
            raise ValueError(f"{path}: tensor {name!r} shape mismatch")
        target[...] = value
    return model
