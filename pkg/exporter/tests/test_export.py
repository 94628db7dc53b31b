import json
import struct

import numpy as np
import pytest

from teb_exporter.cli import main
from teb_exporter.exporter import ExportError, ExportJob, HashTokenizer, export, read_corpus

# the primary engine is consumed strictly through the TEB1 file format; its
# loader doubles as the format validator for the round-trip contract
from timefuse.text_encoder import load_precomputed, validate_teb1
from timefuse.corpus import load_corpus
from timefuse.fusion import FusionModel
from timefuse.time_encoding import TimeEncoder, TimeEncoderConfig


def write_corpus(path, n_docs=10, words_per_doc=8):
    with open(path, "w", encoding="utf-8") as handle:
        for i in range(n_docs):
            rec = {
                "id": f"doc-{i}",
                "title": f"headline {i}",
                "body": " ".join(f"word{i}x{j}" for j in range(words_per_doc)),
                "date": f"2014-01-{i + 1:02d}",
                "entities": [],
                "event": f"ev{i % 3}",
            }
            handle.write(json.dumps(rec) + "\n")
    return str(path)


class TestReadCorpus:
    def test_order_and_text(self, tmp_path):
        path = write_corpus(tmp_path / "c.jsonl", n_docs=3)
        docs = read_corpus(path)
        assert [d[0] for d in docs] == ["doc-0", "doc-1", "doc-2"]
        assert docs[0][1].startswith("headline 0 ")

    def test_empty_rejected(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        with pytest.raises(ExportError, match="empty"):
            read_corpus(path)

    def test_duplicate_id_rejected(self, tmp_path):
        path = tmp_path / "dup.jsonl"
        rec = {"id": "a", "title": "", "body": "x", "date": "2014-01-01"}
        path.write_text(json.dumps(rec) + "\n" + json.dumps(rec) + "\n")
        with pytest.raises(ExportError, match="duplicate"):
            read_corpus(path)


class TestHashTokenizer:
    def test_stable_and_bounded(self):
        tok = HashTokenizer(vocab_size=128)
        ids, total = tok("Storm hits the coast!", max_len=10)
        again, _ = tok("Storm hits the coast!", max_len=10)
        assert ids == again
        assert total == 5  # four words + punctuation token
        assert all(0 <= i < 128 for i in ids)

    def test_truncation_keeps_total(self):
        tok = HashTokenizer()
        ids, total = tok("a b c d e", max_len=3)
        assert len(ids) == 3 and total == 5


class TestExportRoundTrip:
    def test_ten_doc_round_trip_into_primary_engine(self, tmp_path):
        corpus_path = write_corpus(tmp_path / "c.jsonl", n_docs=10)
        out = tmp_path / "emb.teb1"
        job = ExportJob(corpus_path=corpus_path, model="random-bert:2-64",
                        output_path=str(out), batch_size=4, seed=1)
        count, hidden = export(job)
        assert (count, hidden) == (10, 64)

        # validates and loads in the primary engine
        assert validate_teb1(out) == (10, 64)
        backend = load_precomputed(out)
        assert backend.d_model == 64
        assert set(backend.matrices) == {f"doc-{i}" for i in range(10)}
        # headline i + body of 8 words = 10 whitespace/punct tokens
        assert backend.matrices["doc-0"].shape == (10, 64)

        # and drives the fusion model end to end
        corpus = load_corpus(corpus_path)
        config = TimeEncoderConfig(method="sinpe", d_model=64)
        model = FusionModel(backend, TimeEncoder(config), strategy="CM", n_heads=2)
        emb = model.embed_corpus(corpus)
        assert emb.shape == (10, 64)
        assert np.all(np.isfinite(emb))

    def test_record_order_matches_corpus_order(self, tmp_path):
        corpus_path = write_corpus(tmp_path / "c.jsonl", n_docs=6)
        out = tmp_path / "emb.teb1"
        export(ExportJob(corpus_path=corpus_path, model="random-bert:1-32",
                         output_path=str(out), batch_size=4))
        ids = []
        with open(out, "rb") as handle:
            handle.read(4)
            doc_count, d_model = struct.unpack("<II", handle.read(8))
            for _ in range(doc_count):
                (id_len,) = struct.unpack("<H", handle.read(2))
                ids.append(handle.read(id_len).decode("utf-8"))
                (seq_len,) = struct.unpack("<I", handle.read(4))
                handle.read(4 * seq_len * d_model)
        assert ids == [f"doc-{i}" for i in range(6)]

    def test_base_preset_header_is_768(self, tmp_path):
        # "base" hidden size contract, checked with a single shallow layer
        corpus_path = write_corpus(tmp_path / "c.jsonl", n_docs=2, words_per_doc=3)
        out = tmp_path / "emb.teb1"
        _, hidden = export(ExportJob(corpus_path=corpus_path, model="random-bert:1-768",
                                     output_path=str(out), batch_size=2))
        assert hidden == 768
        assert validate_teb1(out) == (2, 768)

    def test_deterministic_mode_byte_identical(self, tmp_path):
        corpus_path = write_corpus(tmp_path / "c.jsonl", n_docs=5)
        a, b = tmp_path / "a.teb1", tmp_path / "b.teb1"
        for out in (a, b):
            export(ExportJob(corpus_path=corpus_path, model="random-bert:2-64",
                             output_path=str(out), seed=7, deterministic=True))
        assert a.read_bytes() == b.read_bytes()

    def test_truncation_warning_logged(self, tmp_path, caplog):
        corpus_path = write_corpus(tmp_path / "c.jsonl", n_docs=2, words_per_doc=40)
        out = tmp_path / "emb.teb1"
        import logging
        with caplog.at_level(logging.WARNING):
            export(ExportJob(corpus_path=corpus_path, model="random-bert:1-32",
                             output_path=str(out), max_seq_len=10))
        assert any("truncated" in rec.message for rec in caplog.records)
        backend = load_precomputed(out)
        assert backend.matrices["doc-0"].shape[0] == 10

    def test_bad_model_spec(self, tmp_path):
        corpus_path = write_corpus(tmp_path / "c.jsonl", n_docs=1)
        with pytest.raises(ExportError, match="random-bert"):
            export(ExportJob(corpus_path=corpus_path, model="random-bert:huge-deal",
                             output_path=str(tmp_path / "x.teb1")))


class TestCli:
    def test_end_to_end(self, tmp_path, capsys):
        corpus_path = write_corpus(tmp_path / "c.jsonl", n_docs=3)
        out = tmp_path / "emb.teb1"
        code = main(["--corpus", corpus_path, "--model", "random-bert:1-32",
                     "--output", str(out), "--batch-size", "2"])
        assert code == 0
        assert "exported 3 documents (d_model=32)" in capsys.readouterr().out
        assert validate_teb1(out) == (3, 32)

    def test_missing_corpus(self, tmp_path, capsys):
        code = main(["--corpus", str(tmp_path / "nope.jsonl"),
                     "--output", str(tmp_path / "x.teb1")])
        assert code == 1
        assert "error" in capsys.readouterr().err
