import math

import numpy as np
import pytest
from scipy import stats

from sane.errors import ArgumentError, ConfigError, FormatError
from sane.tokenizer import (
    PreprocessState,
    destandardize,
    detokenize,
    draw_window,
    fit_preprocess,
    standardize,
    tokenize,
    windows_per_model,
)
from sane.zoo import Architecture, LayerSpec, cnn_arch, mlp_arch

from .conftest import DESK_ARCHS, random_checkpoint


def test_dense_with_bias_single_token_per_row():
    arch = Architecture((4,), (LayerSpec("dense", 4, 3),))
    t = tokenize(random_checkpoint(arch, 0), 5)
    assert t.tokens.shape == (3, 5) and t.mask.all()


def test_conv_two_parts_per_row():
    arch = Architecture((3, 5, 5), (LayerSpec("conv2d", 3, 2, (3, 3)),))
    t = tokenize(random_checkpoint(arch, 0), 16)
    assert len(t) == 4
    assert t.mask[1].sum() == 12 and (t.mask[1][12:] == 0).all()
    assert t.positions.tolist() == [[1, 1, 1], [2, 1, 2], [3, 1, 3], [4, 1, 4]]


def test_cnn_zoo_token_size_289():
    # 32 input channels, 3x3 kernel, plus bias: one row fills a 289-wide token exactly
    arch = Architecture((32, 6, 6), (LayerSpec("conv2d", 32, 4, (3, 3)),))
    t = tokenize(random_checkpoint(arch, 0), 289)
    assert len(t) == 4 and t.mask.all()


@pytest.mark.parametrize("name", sorted(DESK_ARCHS))
@pytest.mark.parametrize("d_t", [1, 5, 17, 40])
def test_identities_on_desk_architectures(name, d_t):
    ckpt = random_checkpoint(DESK_ARCHS[name], 1)
    t = tokenize(ckpt, d_t)
    assert int(t.mask.sum()) == ckpt.parameter_count()
    n = 0
    for li, lay in enumerate(t.layout, start=1):
        spec = ckpt.arch.layers[lay.layer_index]
        c_r = ckpt.row_matrix(lay.layer_index).shape[1]
        assert lay.n_tokens == spec.out_features * math.ceil(c_r / d_t)
        assert (t.positions[n:n + lay.n_tokens, 1] == li).all()
        assert t.positions[n:n + lay.n_tokens, 2].tolist() == list(range(1, lay.n_tokens + 1))
        n += lay.n_tokens
    assert t.positions[:, 0].tolist() == list(range(1, len(t) + 1))
    assert detokenize(t, ckpt.arch, template=ckpt).same_as(ckpt)


def test_fuzz_roundtrip_100_checkpoints():
    rng = np.random.default_rng(42)
    mismatches = 0
    for i in range(100):
        if i % 2:
            arch = mlp_arch(int(rng.integers(1, 5)), tuple(int(h) for h in rng.integers(1, 12, size=rng.integers(1, 4))),
                            int(rng.integers(2, 5)))
        else:
            arch = cnn_arch(tuple(int(c) for c in rng.integers(1, 6, size=2)), int(rng.integers(2, 5)),
                            batchnorm=bool(rng.integers(0, 2)))
        ckpt = random_checkpoint(arch, i)
        d_t = int(rng.integers(1, 30))
        if not detokenize(tokenize(ckpt, d_t), arch, template=ckpt).same_as(ckpt):
            mismatches += 1
    assert mismatches == 0


def test_padding_perturbation_ignored():
    ckpt = random_checkpoint(DESK_ARCHS["mlp"], 0)
    t = tokenize(ckpt, 17)
    t.tokens = t.tokens + (1 - t.mask) * 123.0
    assert detokenize(t, ckpt.arch, template=ckpt).same_as(ckpt)


def test_injective():
    ckpt = random_checkpoint(DESK_ARCHS["cnn"], 0)
    other = ckpt.copy()
    other.tensors["2.bias"][3] += 1e-3
    assert not np.array_equal(tokenize(ckpt, 17).tokens, tokenize(other, 17).tokens)


def test_layout_mismatch():
    t = tokenize(random_checkpoint(DESK_ARCHS["mlp"], 0), 17)
    with pytest.raises(FormatError):
        detokenize(t, mlp_arch(2, (8, 16), 2))


def test_empty_model():
    arch = Architecture((3,), ())
    with pytest.raises(ArgumentError):
        tokenize(random_checkpoint(arch, 0), 4)


class TestStandardize:
    def test_identity_stats(self):
        ckpt = random_checkpoint(DESK_ARCHS["mlp"], 0)
        state = PreprocessState({i: 0.0 for i in (0, 1, 2)}, {i: 1.0 for i in (0, 1, 2)}, 17)
        assert standardize(ckpt, state).same_as(ckpt)

    def test_constant_layer_floor(self):
        ckpt = random_checkpoint(DESK_ARCHS["mlp"], 0)
        ckpt.tensors["1.weight"][:] = 0.5
        ckpt.tensors["1.bias"][:] = 0.5
        state = fit_preprocess([ckpt], 17)
        assert state.std[1] == 1e-8
        assert (standardize(ckpt, state).row_matrix(1) == 0).all()

    def test_roundtrip(self):
        cks = [random_checkpoint(DESK_ARCHS["cnn"], s) for s in range(5)]
        state = fit_preprocess(cks, 17)
        back = destandardize(standardize(cks[0], state), state)
        for k, v in cks[0].tensors.items():
            assert np.abs(back.tensors[k] - v).max() <= 1e-6 * np.abs(v).max()

    def test_missing_layer_stats(self):
        ckpt = random_checkpoint(DESK_ARCHS["mlp"], 0)
        with pytest.raises(ConfigError):
            standardize(ckpt, PreprocessState({0: 0.0}, {0: 1.0}, 17))

    def test_state_json_roundtrip(self):
        state = fit_preprocess([random_checkpoint(DESK_ARCHS["mlp"], 0)], 17, reference_id=3)
        assert PreprocessState.from_dict(state.to_dict()) == state


class TestWindows:
    def test_full_sequence_when_ws_large(self):
        t = tokenize(random_checkpoint(DESK_ARCHS["mlp"], 0), 17)
        tok, pos, mask = draw_window(t, 100, np.random.default_rng(0))
        assert np.array_equal(tok, t.tokens) and np.array_equal(pos, t.positions)

    def test_single_token_keeps_position(self):
        t = tokenize(random_checkpoint(DESK_ARCHS["mlp"], 0), 17)
        rng = np.random.default_rng(3)
        for _ in range(20):
            tok, pos, _ = draw_window(t, 1, rng)
            n = pos[0, 0]
            assert np.array_equal(tok[0], t.tokens[n - 1]) and np.array_equal(pos[0], t.positions[n - 1])

    def test_start_distribution_uniform(self):
        t = tokenize(random_checkpoint(DESK_ARCHS["mlp"], 0), 17)  # N = 34
        rng = np.random.default_rng(7)
        ws = 16
        starts = [draw_window(t, ws, rng)[1][0, 0] for _ in range(10_000)]
        counts = np.bincount(starts, minlength=len(t) - ws + 2)[1:]
        assert len(counts) == len(t) - ws + 1
        assert stats.chisquare(counts).pvalue > 0.01

    def test_windows_per_model(self):
        assert windows_per_model(50, 32) == 2
        assert windows_per_model(32, 32) == 1
        assert windows_per_model(50_000, 256) == 196
