import itertools

import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment as scipy_lsa

from sane.align import (
    align_zoo,
    apply_permutation,
    boundaries,
    identity_permutations,
    invert,
    random_permutations,
    vec_distance,
    weight_matching,
)
from sane.errors import ArgumentError, DataError, DimensionError
from sane.hungarian import linear_sum_assignment
from sane.zoo import cnn_arch, mlp_arch, predict_logits

from .conftest import DESK_ARCHS, random_checkpoint


class TestHungarian:
    def test_against_scipy_and_brute_force(self):
        rng = np.random.default_rng(0)
        for n in range(1, 7):
            for _ in range(10):
                c = rng.normal(size=(n, n))
                cols = linear_sum_assignment(c)
                best = min(c[np.arange(n), list(p)].sum() for p in itertools.permutations(range(n)))
                assert c[np.arange(n), cols].sum() == pytest.approx(best, abs=1e-12)
                r, s = scipy_lsa(c)
                assert c[r, s].sum() == pytest.approx(best, abs=1e-12)

    def test_lexicographic_tie_break(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            n = int(rng.integers(2, 6))
            c = rng.integers(0, 2, size=(n, n)).astype(float)
            cols = linear_sum_assignment(c)
            opt = min(c[np.arange(n), list(p)].sum() for p in itertools.permutations(range(n)))
            lex = min(p for p in itertools.permutations(range(n)) if c[np.arange(n), list(p)].sum() == opt)
            assert tuple(cols) == lex

    def test_rectangular_and_maximize(self):
        c = np.array([[1.0, 5, 3], [2, 4, 9]])
        cols = linear_sum_assignment(c, maximize=True)
        assert cols.tolist() == [1, 2]

    def test_bad_shape(self):
        with pytest.raises(DimensionError):
            linear_sum_assignment(np.zeros((3, 2)))


class TestApplyPermutation:
    @pytest.mark.parametrize("name", sorted(DESK_ARCHS))
    def test_identity_and_inverse(self, name):
        ckpt = random_checkpoint(DESK_ARCHS[name], 0)
        assert apply_permutation(ckpt, identity_permutations(ckpt.arch)).same_as(ckpt)
        p = random_permutations(ckpt.arch, np.random.default_rng(2))
        assert apply_permutation(apply_permutation(ckpt, p), invert(p)).same_as(ckpt)

    @pytest.mark.parametrize("name", sorted(DESK_ARCHS))
    def test_function_preserved(self, name):
        ckpt = random_checkpoint(DESK_ARCHS[name], 4)
        x = np.random.default_rng(5).normal(size=(100,) + ckpt.arch.input_shape)
        p = random_permutations(ckpt.arch, np.random.default_rng(6))
        diff = np.abs(predict_logits(ckpt, x) - predict_logits(apply_permutation(ckpt, p), x)).max()
        assert diff < 1e-5

    def test_width_mismatch(self):
        ckpt = random_checkpoint(DESK_ARCHS["mlp"], 0)
        with pytest.raises(DimensionError):
            apply_permutation(ckpt, [np.arange(16), np.arange(15)])

    def test_boundaries_cnn(self):
        bs = boundaries(cnn_arch())
        assert [(b.producer, b.consumer, b.norms, b.width, b.group) for b in bs] == [
            (0, 2, (1,), 8, 9), (2, 4, (3,), 8, 16)]


class TestWeightMatching:
    def test_self_match_is_identity(self):
        a = random_checkpoint(DESK_ARCHS["cnn"], 0)
        perms, trace = weight_matching(a, a, return_trace=True)
        assert all(np.array_equal(p, np.arange(len(p))) for p in perms)
        assert trace[-1] == 0.0

    @pytest.mark.parametrize("name", ["mlp", "cnn", "mlp_wide"])
    @pytest.mark.parametrize("seed", range(3))
    def test_planted_permutation_recovered(self, name, seed):
        arch = DESK_ARCHS[name] if name != "mlp" else mlp_arch(2, (8, 8), 2)
        a = random_checkpoint(arch, seed)
        pi = random_permutations(arch, np.random.default_rng(seed + 10))
        b = apply_permutation(a, pi)
        perms = weight_matching(a, b)
        for got, want in zip(perms, invert(pi)):
            assert np.array_equal(got, want)
        assert apply_permutation(b, perms).same_as(a)

    @pytest.mark.parametrize("width", [4, 6])
    def test_matches_exhaustive_search(self, width):
        arch = mlp_arch(3, (width,), 2)
        for seed in range(5):
            a, b = random_checkpoint(arch, seed), random_checkpoint(arch, seed + 100)
            perms = weight_matching(a, b)
            brute = min(vec_distance(a, apply_permutation(b, [np.array(p)]))
                        for p in itertools.permutations(range(width)))
            assert vec_distance(a, apply_permutation(b, perms)) == pytest.approx(brute, rel=1e-12, abs=1e-12)

    def test_objective_monotone(self):
        arch = mlp_arch(2, (12, 12, 12), 3)
        for seed in range(5):
            a, b = random_checkpoint(arch, seed), random_checkpoint(arch, seed + 50)
            _, trace = weight_matching(a, b, return_trace=True)
            assert all(y <= x for x, y in zip(trace, trace[1:]))

    def test_arch_mismatch(self):
        with pytest.raises(ArgumentError):
            weight_matching(random_checkpoint(mlp_arch(), 0), random_checkpoint(mlp_arch(2, (8, 16), 2), 0))


class TestAlignZoo:
    def test_alignment(self, small_mlp_zoo):
        zoo = small_mlp_zoo
        ref = zoo.manifest.model_ids("train")[0]
        aligned = align_zoo(zoo, ref)
        for e in zoo.manifest.epochs_of(ref):
            assert aligned.get(ref, e).same_as(zoo.get(ref, e))
        for mid in zoo.manifest.model_ids():
            perms = [np.array(p) for p in aligned.manifest.permutations[mid]]
            for e in zoo.manifest.epochs_of(mid):
                assert apply_permutation(zoo.get(mid, e), perms).same_as(aligned.get(mid, e))
        others = [m for m in zoo.manifest.model_ids() if m != ref]
        decreased = sum(vec_distance(zoo.get(ref), aligned.get(m)) < vec_distance(zoo.get(ref), zoo.get(m))
                        for m in others)
        assert decreased >= 0.95 * len(others)

    def test_reference_must_be_train(self, small_mlp_zoo):
        val_id = small_mlp_zoo.manifest.model_ids("val")[0]
        with pytest.raises(ArgumentError):
            align_zoo(small_mlp_zoo, val_id)

    def test_missing_last_epoch(self, small_mlp_zoo):
        from sane.zoo import Zoo
        cks = dict(small_mlp_zoo.checkpoints)
        victim = small_mlp_zoo.manifest.model_ids()[-1]
        del cks[(victim, 5)]
        with pytest.raises(DataError):
            align_zoo(Zoo(small_mlp_zoo.manifest, cks), small_mlp_zoo.manifest.model_ids("train")[0])
