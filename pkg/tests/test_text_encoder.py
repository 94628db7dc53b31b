import io

import numpy as np
import pytest

from timefuse.text_encoder import (
    HashedRandomBackend,
    PrecomputedBackend,
    PrecomputedFormatError,
    ToyTrainableBackend,
    encode,
    load_precomputed,
    read_teb1,
    tokenize,
    validate_teb1,
    write_teb1,
)

from conftest import entity_span, make_doc


class TestTokenize:
    def test_entity_flags_by_span_intersection(self):
        doc = make_doc("d", title="Typhoon hits Japan",
                       entities=[entity_span("Japan", 13, 18, field="title")])
        tokens = tokenize(doc)
        assert [t.text for t in tokens] == ["Typhoon", "hits", "Japan"]
        assert [t.entity for t in tokens] == [False, False, True]

    def test_partial_overlap_still_flags(self):
        doc = make_doc("d", body="northeastern Japan",
                       entities=[entity_span("eastern Japan", 5, 18, field="body")])
        tokens = tokenize(doc)
        assert [t.entity for t in tokens] == [True, True]

    def test_truncation_to_cap(self):
        doc = make_doc("d", body=" ".join(f"w{i}" for i in range(500)))
        assert len(tokenize(doc, max_seq_len=230)) == 230
        assert len(tokenize(doc)) == 230  # the default cap

    def test_empty_document_synthetic_token(self):
        tokens = tokenize(make_doc("d", title="", body=""))
        assert len(tokens) == 1
        assert tokens[0].entity is False

    def test_title_comes_before_body(self):
        doc = make_doc("d", title="alpha", body="beta gamma")
        assert [t.field for t in tokenize(doc)] == ["title", "body", "body"]

    def test_punctuation_tokens(self):
        doc = make_doc("d", body="Hello, world!")
        assert [t.text for t in tokenize(doc)] == ["Hello", ",", "world", "!"]


class TestHashedRandomBackend:
    def test_deterministic_across_instances(self):
        doc = make_doc("d", body="storm hits coast")
        a = encode(doc, HashedRandomBackend(d_model=8, seed=3))
        b = encode(doc, HashedRandomBackend(d_model=8, seed=3))
        assert a.tobytes() == b.tobytes()

    def test_seed_changes_vectors(self):
        doc = make_doc("d", body="storm")
        a = encode(doc, HashedRandomBackend(d_model=8, seed=3))
        b = encode(doc, HashedRandomBackend(d_model=8, seed=4))
        assert not np.allclose(a, b)

    def test_output_width(self):
        doc = make_doc("d", body="one two three")
        assert encode(doc, HashedRandomBackend(d_model=24, seed=0)).shape == (3, 24)


class TestEntityLayer:
    def test_zero_base_rows_isolate_entity_vectors(self):
        backend = ToyTrainableBackend(d_model=6, n_buckets=8, seed=0)
        backend.table[:] = 0.0
        flagged = make_doc("a", body="alpha beta",
                           entities=[entity_span("alpha beta", 0, 10)])
        plain = make_doc("b", body="alpha beta")
        m_flagged = encode(flagged, backend)
        m_plain = encode(plain, backend)
        for row in m_flagged:
            np.testing.assert_array_equal(row, backend.entity_present)
        for row in m_plain:
            np.testing.assert_array_equal(row, backend.entity_absent)

    def test_flipping_one_flag_changes_exactly_that_row(self):
        backend = HashedRandomBackend(d_model=8, seed=1)
        base = make_doc("a", body="alpha beta gamma")
        flagged = make_doc("a", body="alpha beta gamma",
                           entities=[entity_span("beta", 6, 10)])
        diff = encode(flagged, backend) - encode(base, backend)
        assert np.any(diff[1] != 0.0)
        np.testing.assert_array_equal(diff[0], 0.0)
        np.testing.assert_array_equal(diff[2], 0.0)


class TestToyTrainableGradients:
    def test_table_gradient_matches_finite_differences(self):
        backend = ToyTrainableBackend(d_model=5, n_buckets=16, seed=2)
        doc = make_doc("d", body="alpha beta alpha",
                       entities=[entity_span("beta", 6, 10)])
        tokens = tokenize(doc)
        rng = np.random.default_rng(0)
        upstream = rng.normal(size=(3, 5))

        def loss() -> float:
            return float((encode(doc, backend) * upstream).sum())

        grads = {name: np.zeros_like(arr) for name, arr in backend.parameters().items()}
        backend.backward(doc, tokens, upstream, grads)

        h = 1e-6
        for name, arr in backend.parameters().items():
            flat = arr.reshape(-1)
            idx = rng.choice(flat.size, size=min(10, flat.size), replace=False)
            for i in idx:
                old = flat[i]
                flat[i] = old + h
                up = loss()
                flat[i] = old - h
                down = loss()
                flat[i] = old
                fd = (up - down) / (2 * h)
                got = grads[name].reshape(-1)[i]
                assert got == pytest.approx(fd, rel=1e-4, abs=1e-7), name


def _matrix(seq_len, d, seed):
    return np.random.default_rng(seed).normal(size=(seq_len, d)).astype("<f4")


class TestTeb1:
    def test_round_trip(self, tmp_path):
        records = [("doc-a", _matrix(3, 16, 0)), ("doc-b", _matrix(7, 16, 1))]
        path = tmp_path / "m.teb1"
        with open(path, "wb") as handle:
            write_teb1(records, 16, handle)
        matrices, d_model = read_teb1(path)
        assert d_model == 16
        assert set(matrices) == {"doc-a", "doc-b"}
        np.testing.assert_array_equal(matrices["doc-b"], records[1][1])

    def test_empty_file_is_valid(self, tmp_path):
        path = tmp_path / "empty.teb1"
        with open(path, "wb") as handle:
            write_teb1([], 768, handle)
        assert validate_teb1(path) == (0, 768)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.teb1"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(PrecomputedFormatError, match="magic"):
            read_teb1(path)

    def test_truncated_payload(self, tmp_path):
        buffer = io.BytesIO()
        write_teb1([("a", _matrix(4, 8, 0))], 8, buffer)
        path = tmp_path / "trunc.teb1"
        path.write_bytes(buffer.getvalue()[:-5])
        with pytest.raises(PrecomputedFormatError, match="truncated"):
            read_teb1(path)

    def test_duplicate_id(self, tmp_path):
        buffer = io.BytesIO()
        write_teb1([("a", _matrix(2, 4, 0)), ("a", _matrix(2, 4, 1))], 4, buffer)
        path = tmp_path / "dup.teb1"
        path.write_bytes(buffer.getvalue())
        with pytest.raises(PrecomputedFormatError, match="duplicate id"):
            read_teb1(path)

    def test_wide_record_shape(self, tmp_path):
        path = tmp_path / "wide.teb1"
        with open(path, "wb") as handle:
            write_teb1([("doc", _matrix(230, 768, 2))], 768, handle)
        backend = load_precomputed(path)
        assert backend.d_model == 768
        assert backend.matrices["doc"].shape == (230, 768)


class TestPrecomputedBackend:
    def test_returns_stored_matrix_with_entity_vectors(self, tmp_path):
        stored = _matrix(7, 16, 3)
        path = tmp_path / "m.teb1"
        with open(path, "wb") as handle:
            write_teb1([("d", stored)], 16, handle)
        backend = load_precomputed(path)
        doc = make_doc("d", body="one two three four five six seven")
        out = encode(doc, backend)
        assert out.shape == (7, 16)
        np.testing.assert_allclose(out, stored.astype(np.float64) + backend.entity_absent)

    def test_missing_id_names_the_document(self):
        backend = PrecomputedBackend({}, d_model=4)
        with pytest.raises(KeyError, match="ghost"):
            encode(make_doc("ghost", body="x"), backend)

    def test_rows_past_tokenizer_get_absent_vector(self, tmp_path):
        stored = np.zeros((5, 4), dtype="<f4")
        path = tmp_path / "m.teb1"
        with open(path, "wb") as handle:
            write_teb1([("d", stored)], 4, handle)
        backend = load_precomputed(path)
        out = encode(make_doc("d", body="short"), backend)  # 1 token, 5 stored rows
        for row in out[1:]:
            np.testing.assert_array_equal(row, backend.entity_absent)
