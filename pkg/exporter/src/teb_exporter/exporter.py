"""Run a transformer over a corpus file and write last-layer token matrices
in the TEB1 binary format.

The corpus is the engine's line-delimited JSON format (``id``, ``title``,
``body``, ...); the input text per document is title + body. Two model
sources are supported:

* any Hugging Face model name or local path (``AutoModel``), tokenized by
  its own tokenizer;
* ``random-bert:<preset or LAYERS-HIDDEN>`` — a deterministically seeded,
  randomly initialized BERT with a hash-bucket tokenizer, for fully offline
  and reproducible runs (``random-bert:base`` has hidden size 768).

Raw token matrices are exported (no pooling), so downstream fusion models
keep control of attention and pooling.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import struct
import tempfile
from dataclasses import dataclass

import numpy as np
import torch

logger = logging.getLogger(__name__)

TEB1_MAGIC = b"TEB1"

_WORD_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)

RANDOM_BERT_PRESETS = {
    "tiny": (2, 128),
    "small": (4, 512),
    "base": (12, 768),
}
_RANDOM_VOCAB = 8192


class ExportError(ValueError):
    pass


@dataclass
class ExportJob:
    corpus_path: str
    model: str = "random-bert:tiny"
    output_path: str = "embeddings.teb1"
    max_seq_len: int = 230
    batch_size: int = 8
    seed: int = 0
    deterministic: bool = True

    def __post_init__(self):
        if self.max_seq_len < 1:
            raise ExportError("max_seq_len must be >= 1")
        if self.batch_size < 1:
            raise ExportError("batch_size must be >= 1")


def read_corpus(path) -> list[tuple[str, str]]:
    """(id, title + body) pairs in file order."""
    docs: list[tuple[str, str]] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ExportError(f"line {lineno}: malformed JSON ({exc.msg})") from None
            doc_id = str(rec["id"])
            if doc_id in seen:
                raise ExportError(f"line {lineno}: duplicate id {doc_id!r}")
            seen.add(doc_id)
            text = (str(rec.get("title", "")) + " " + str(rec.get("body", ""))).strip()
            docs.append((doc_id, text))
    if not docs:
        raise ExportError("empty corpus")
    return docs


class HashTokenizer:
    """Whitespace+punctuation tokens hashed into a fixed id range; entirely
    offline and stable across processes."""

    def __init__(self, vocab_size: int = _RANDOM_VOCAB):
        self.vocab_size = vocab_size

    def __call__(self, text: str, max_len: int) -> tuple[list[int], int]:
        words = _WORD_RE.findall(text) or [""]
        total = len(words)
        ids = [
            int.from_bytes(hashlib.blake2b(w.encode("utf-8"), digest_size=8).digest(),
                           "little") % self.vocab_size
            for w in words[:max_len]
        ]
        return ids, total


def _build_random_bert(spec: str, seed: int):
    from transformers import BertConfig, BertModel

    name = spec.split(":", 1)[1] if ":" in spec else "tiny"
    if name in RANDOM_BERT_PRESETS:
        layers, hidden = RANDOM_BERT_PRESETS[name]
    else:
        try:
            layers, hidden = (int(p) for p in name.split("-"))
        except ValueError:
            raise ExportError(
                f"bad random-bert spec {spec!r}; use a preset "
                f"({', '.join(RANDOM_BERT_PRESETS)}) or LAYERS-HIDDEN") from None
    if hidden % 64 == 0:
        heads = max(1, hidden // 64)
    else:
        heads = 1
    config = BertConfig(
        vocab_size=_RANDOM_VOCAB, hidden_size=hidden, num_hidden_layers=layers,
        num_attention_heads=heads, intermediate_size=4 * hidden,
        max_position_embeddings=1024)
    torch.manual_seed(seed)
    model = BertModel(config)
    return model, HashTokenizer(), hidden


def _load_pretrained(name: str):
    from transformers import AutoModel, AutoTokenizer

    tokenizer = AutoTokenizer.from_pretrained(name)
    model = AutoModel.from_pretrained(name)
    return model, tokenizer, int(model.config.hidden_size)


def _encode_batch_random(model, tokenizer: HashTokenizer, texts, max_seq_len):
    encoded = [tokenizer(text, max_seq_len) for text in texts]
    lengths = [len(ids) for ids, _ in encoded]
    width = max(lengths)
    input_ids = torch.zeros((len(texts), width), dtype=torch.long)
    mask = torch.zeros((len(texts), width), dtype=torch.long)
    for row, (ids, _) in enumerate(encoded):
        input_ids[row, :len(ids)] = torch.tensor(ids, dtype=torch.long)
        mask[row, :len(ids)] = 1
    with torch.no_grad():
        out = model(input_ids=input_ids, attention_mask=mask)
    hidden = out.last_hidden_state
    totals = [total for _, total in encoded]
    return [hidden[row, :lengths[row]].numpy().astype("<f4") for row in range(len(texts))], totals


def _encode_batch_pretrained(model, tokenizer, texts, max_seq_len):
    batch = tokenizer(list(texts), truncation=True, max_length=max_seq_len,
                      padding=True, return_tensors="pt")
    overflow = [len(tokenizer(t)["input_ids"]) for t in texts]
    with torch.no_grad():
        out = model(**batch)
    hidden = out.last_hidden_state
    lengths = batch["attention_mask"].sum(dim=1).tolist()
    return [hidden[row, :int(lengths[row])].numpy().astype("<f4")
            for row in range(len(texts))], overflow


def export(job: ExportJob) -> tuple[int, int]:
    """Write the TEB1 file; returns (doc_count, d_model)."""
    docs = read_corpus(job.corpus_path)
    if job.deterministic:
        torch.set_num_threads(1)
        torch.manual_seed(job.seed)

    if job.model.startswith("random-bert"):
        model, tokenizer, hidden = _build_random_bert(job.model, job.seed)
        encode = lambda texts: _encode_batch_random(model, tokenizer, texts, job.max_seq_len)
    else:
        model, tokenizer, hidden = _load_pretrained(job.model)
        encode = lambda texts: _encode_batch_pretrained(model, tokenizer, texts, job.max_seq_len)
    model.eval()

    directory = os.path.dirname(os.path.abspath(job.output_path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".teb1.tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(TEB1_MAGIC)
            handle.write(struct.pack("<II", len(docs), hidden))
            for start in range(0, len(docs), job.batch_size):
                chunk = docs[start:start + job.batch_size]
                matrices, totals = encode([text for _, text in chunk])
                for (doc_id, _), matrix, total in zip(chunk, matrices, totals):
                    if total > job.max_seq_len:
                        logger.warning("document %r truncated: %d tokens > max_seq_len %d",
                                       doc_id, total, job.max_seq_len)
                    raw = doc_id.encode("utf-8")
                    if len(raw) > 0xFFFF:
                        raise ExportError(f"id too long for TEB1: {doc_id!r}")
                    handle.write(struct.pack("<H", len(raw)))
                    handle.write(raw)
                    handle.write(struct.pack("<I", matrix.shape[0]))
                    handle.write(np.ascontiguousarray(matrix, dtype="<f4").tobytes())
        os.replace(tmp, job.output_path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return len(docs), hidden
