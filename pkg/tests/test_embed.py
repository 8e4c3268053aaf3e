import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sane.autoencoder import encode_window
from sane.container import load_container
from sane.embed import (
    EmbeddingSequence,
    aggregate_mean,
    chunk_bounds,
    decode_sequence,
    embed_model,
    embed_zoo,
    export_embeddings,
    layer_spread,
    pairwise_distances,
    reconstruction_error,
)
from sane.errors import ArgumentError


def seq_from(z, layers):
    layers = np.asarray(layers)
    pos = np.stack([np.arange(1, len(z) + 1), layers, np.ones(len(z), int)], axis=1)
    return EmbeddingSequence(np.asarray(z, dtype=np.float64), pos)


@given(n=st.integers(0, 200), chunk=st.integers(1, 50), halo=st.integers(0, 60))
def test_chunks_partition_sequence(n, chunk, halo):
    covered = []
    for s, e, cs, ce in chunk_bounds(n, chunk, halo):
        assert 0 <= cs <= s < e <= ce <= n
        assert s - cs <= halo and ce - e <= halo
        covered.extend(range(s, e))
    assert covered == list(range(n))


def test_bad_chunk_arguments():
    with pytest.raises(ArgumentError):
        chunk_bounds(10, 0, 1)
    with pytest.raises(ArgumentError):
        chunk_bounds(10, 4, -1)


class TestEmbedModel:
    def test_single_chunk_equals_direct_encode(self, tiny_sane):
        seq = next(iter(tiny_sane.prepared.anchor.values()))
        e = embed_model(tiny_sane.model, seq, chunk=len(seq), halo=3)
        assert np.array_equal(e.z, encode_window(tiny_sane.model, seq.tokens, seq.positions))

    @settings(max_examples=15, deadline=None)
    @given(chunk=st.integers(1, 40), halo=st.integers(0, 12))
    def test_length_and_determinism(self, tiny_sane, chunk, halo):
        seq = next(iter(tiny_sane.prepared.anchor.values()))
        e = embed_model(tiny_sane.model, seq, chunk, halo)
        assert e.z.shape == (len(seq), tiny_sane.model.cfg.d_z)
        assert np.array_equal(e.z, embed_model(tiny_sane.model, seq, chunk, halo).z)

    def test_halo_reduces_deviation_from_single_pass(self, tiny_sane):
        m = tiny_sane.model
        dev = {0: [], m.cfg.ws: []}
        for key in tiny_sane.prepared.keys["test"] + tiny_sane.prepared.keys["val"]:
            seq = tiny_sane.prepared.anchor[key]
            full = embed_model(m, seq, chunk=len(seq), halo=0).z
            for h in dev:
                dev[h].append(np.abs(embed_model(m, seq, chunk=m.cfg.ws // 2, halo=h).z - full).mean())
        assert np.mean(dev[m.cfg.ws]) < np.mean(dev[0])

    def test_decode_sequence_shape(self, tiny_sane):
        seq = next(iter(tiny_sane.prepared.anchor.values()))
        e = embed_model(tiny_sane.model, seq)
        assert decode_sequence(tiny_sane.model, e.z, e.positions).shape == seq.tokens.shape

    def test_reconstruction_error_matches_loop(self, tiny_sane, small_aligned_zoo):
        from sane.tokenizer import standardize, tokenize

        m, state = tiny_sane.model, tiny_sane.state
        ck = small_aligned_zoo.get(small_aligned_zoo.manifest.model_ids("val")[0])
        t = tokenize(standardize(ck, state), m.cfg.d_t)
        z = embed_model(m, t, chunk=5, halo=0).z
        rec = decode_sequence(m, z, t.positions, chunk=5, halo=0)
        sq = sum(float(rec[i, j] - t.tokens[i, j]) ** 2
                 for i in range(len(t)) for j in range(m.cfg.d_t) if t.mask[i, j])
        got = reconstruction_error(m, state, ck, chunk=5, halo=0)
        assert got == pytest.approx(sq / t.mask.sum(), rel=1e-9)
        assert got < 1.0


class TestAggregate:
    def test_single_token(self):
        z = np.array([[1.0, -2.0, 3.0]])
        assert np.array_equal(aggregate_mean(seq_from(z, [1])), z[0])

    def test_symmetric_pair(self):
        v = np.array([0.3, -1.2, 2.0])
        assert np.array_equal(aggregate_mean(seq_from([v, -v], [1, 1])), np.zeros(3))

    def test_empty(self):
        with pytest.raises(ArgumentError):
            aggregate_mean(seq_from(np.zeros((0, 3)), []))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 40), st.integers(1, 6), st.integers(0, 2**32 - 1))
    def test_loop_oracle_and_order(self, n, d, seed):
        rng = np.random.default_rng(seed)
        z = rng.normal(size=(n, d))
        e = seq_from(z, np.ones(n, int))
        oracle = [sum(z[i, j] for i in range(n)) / n for j in range(d)]
        assert np.allclose(aggregate_mean(e), oracle, atol=1e-12, rtol=0)
        perm = rng.permutation(n)
        assert np.allclose(aggregate_mean(seq_from(z[perm], np.ones(n, int))), aggregate_mean(e), atol=1e-12, rtol=0)


class TestLayerSpread:
    def test_identical_tokens(self):
        v = np.array([1.0, 2.0, 3.0])
        assert layer_spread(seq_from([v, v, v], [1, 1, 1])) == {1: 0.0}

    def test_two_point(self):
        v = np.array([0.5, -2.0, 1.5])
        out = layer_spread(seq_from([v, -v], [1, 1]))
        assert out[1] == pytest.approx(np.abs(v).mean(), abs=1e-15)

    def test_single_token_layer(self):
        out = layer_spread(seq_from([[1.0, 2.0], [3.0, 4.0], [5.0, 7.0]], [1, 2, 2]))
        assert out[1] == 0.0 and out[2] == pytest.approx(1.25)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 30), st.integers(1, 5), st.integers(0, 2**32 - 1))
    def test_scalar_oracle(self, n, d, seed):
        rng = np.random.default_rng(seed)
        z = rng.normal(size=(n, d))
        layers = rng.integers(1, 4, size=n)
        out = layer_spread(seq_from(z, layers))
        for l, got in out.items():
            rows = [z[i] for i in range(n) if layers[i] == l]
            stds = []
            for j in range(d):
                mu = sum(r[j] for r in rows) / len(rows)
                stds.append(math.sqrt(sum((r[j] - mu) ** 2 for r in rows) / len(rows)))
            assert got == pytest.approx(sum(stds) / d, abs=1e-10)
            assert got >= 0


class TestPairwise:
    def test_two_tokens(self):
        d = pairwise_distances(seq_from([[0.0, 0.0], [3.0, 4.0]], [1, 1]), 1)
        assert d.tolist() == [5.0]

    def test_identical(self):
        d = pairwise_distances(seq_from(np.ones((5, 3)), np.ones(5, int)), 1)
        assert len(d) == 10 and (d == 0).all()

    def test_needs_two(self):
        with pytest.raises(ArgumentError):
            pairwise_distances(seq_from(np.ones((1, 3)), [1]), 1)

    def test_loop_oracle(self):
        rng = np.random.default_rng(0)
        z = rng.normal(size=(12, 6))
        got = pairwise_distances(seq_from(z, np.ones(12, int)), 1)
        oracle = [np.sqrt(((z[i] - z[j]) ** 2).sum()) for i in range(12) for j in range(i + 1, 12)]
        assert np.array_equal(got, oracle)


def test_export(tiny_sane, small_aligned_zoo, tmp_path):
    embs = embed_zoo(tiny_sane.model, tiny_sane.state, small_aligned_zoo, split="test")
    csv_path = export_embeddings(tmp_path / "emb", embs)
    lines = csv_path.read_text().splitlines()
    assert len(lines) == len(embs) + 1
    assert lines[0].startswith("model_id,epoch,zbar_0")
    tensors, meta = load_container(tmp_path / "emb")
    key = sorted(embs)[0]
    assert np.array_equal(tensors[f"m{key[0]}_e{key[1]}/z"], embs[key].z)
