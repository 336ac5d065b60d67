import itertools
import math
from collections import defaultdict

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from signrec import engine as ops
from signrec.ctc import (
    DecodeConfig, GlossVocabulary, InfeasibleAlignment, beam_decode, collapse, ctc_brute_force, ctc_loss,
    greedy_decode, length_penalty, read_decodes, required_frames, write_decodes,
)
from signrec.engine import DiffArray, GradTape, backward, finite_difference_gradient, relative_error
from signrec.errors import ConfigError, ContractError, DataError


def softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def random_target(rng, V, max_len):
    return tuple(int(v) for v in rng.integers(1, V + 1, size=rng.integers(0, max_len + 1)))


class TestLoss:
    def test_single_frame_single_path(self):
        x = np.array([[0.3, -1.2]])
        loss = ctc_loss(DiffArray(x), [1]).item()
        assert loss == pytest.approx(-math.log(softmax(x)[0, 1]), abs=1e-14)

    def test_two_frames_enumerated(self):
        x = np.array([[0.5, -0.25], [1.5, 0.75]])
        p = softmax(x)
        total = p[0, 1] * p[1, 1] + p[0, 1] * p[1, 0] + p[0, 0] * p[1, 1]
        assert ctc_loss(DiffArray(x), [1]).item() == pytest.approx(-math.log(total), abs=1e-13)

    def test_infeasible(self):
        res = ctc_loss(DiffArray(np.zeros((1, 2))), [1, 1])
        assert isinstance(res, InfeasibleAlignment)
        assert res.required == 3 and res.value == math.inf

    def test_required_frames(self):
        assert required_frames([1, 1]) == 3
        assert required_frames([1, 2, 2, 2]) == 6
        assert required_frames([]) == 0

    def test_bad_target_ids(self):
        with pytest.raises(DataError):
            ctc_loss(DiffArray(np.zeros((3, 3))), [0])
        with pytest.raises(DataError):
            ctc_loss(DiffArray(np.zeros((3, 3))), [3])

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        checked = 0
        while checked < 200:
            T, V = int(rng.integers(1, 7)), int(rng.integers(1, 4))
            x = rng.normal(scale=2.0, size=(T, V + 1))
            y = random_target(rng, V, T)
            res = ctc_loss(DiffArray(x), y)
            if isinstance(res, InfeasibleAlignment):
                assert ctc_brute_force(x, y) == math.inf
                continue
            assert abs(res.item() - ctc_brute_force(x, y)) < 1e-9
            checked += 1

    @pytest.mark.parametrize("T,V", [(1, 1), (2, 2), (3, 2), (4, 2), (4, 1)])
    def test_total_probability(self, T, V):
        x = np.random.default_rng(T * 10 + V).normal(size=(T, V + 1))
        total = 0.0
        for L in range(T + 1):
            for y in itertools.product(range(1, V + 1), repeat=L):
                res = ctc_loss(DiffArray(x), y)
                if not isinstance(res, InfeasibleAlignment):
                    p = math.exp(-res.item())
                    assert 0.0 < p <= 1.0
                    total += p
        assert abs(total - 1.0) < 1e-9

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(6, 4))
        y = [1, 2, 2, 3]
        leaf = DiffArray(x, requires_grad=True)
        with GradTape() as tape:
            loss = ctc_loss(leaf, y)
        g = backward(loss, tape)[leaf.node_id]
        num = finite_difference_gradient(lambda v: ctc_loss(v, y), DiffArray(x))
        assert relative_error(g, num) < 1e-4

    def test_gradient_through_upstream_ops(self):
        rng = np.random.default_rng(9)
        w0 = rng.normal(size=(3, 4))
        h = DiffArray(rng.normal(size=(5, 3)))
        f = lambda w: ctc_loss(ops.matmul(h, w), [1, 3])  # noqa: E731
        leaf = DiffArray(w0, requires_grad=True)
        with GradTape() as tape:
            loss = f(leaf)
        g = backward(loss, tape)[leaf.node_id]
        assert relative_error(g, finite_difference_gradient(f, DiffArray(w0))) < 1e-4


class TestBruteForce:
    def test_empty_target(self):
        x = np.random.default_rng(0).normal(size=(3, 3))
        p = softmax(x)
        assert ctc_brute_force(x, ()) == pytest.approx(-np.log(np.prod(p[:, 0])), abs=1e-12)

    def test_single_frame_two_paths(self):
        x = np.array([[0.2, 0.9]])
        p = softmax(x)
        assert math.exp(-ctc_brute_force(x, (1,))) + math.exp(-ctc_brute_force(x, ())) == pytest.approx(1.0)
        assert math.exp(-ctc_brute_force(x, (1,))) == pytest.approx(p[0, 1])

    def test_refuses_large(self):
        with pytest.raises(ContractError):
            ctc_brute_force(np.zeros((9, 2)), (1,))
        with pytest.raises(ContractError):
            ctc_brute_force(np.zeros((3, 6)), (1,))


def frame_matrix(argmaxes, C, margin=3.0):
    x = np.zeros((len(argmaxes), C))
    x[np.arange(len(argmaxes)), argmaxes] = margin
    return x


class TestGreedy:
    def test_collapse(self):
        assert greedy_decode(frame_matrix([1, 1, 0, 1], 2)) == (1, 1)

    def test_all_blank(self):
        assert greedy_decode(frame_matrix([0, 0, 0], 3)) == ()

    def test_tie_lowest_index(self):
        x = np.array([[0.0, 1.0, 1.0], [0.0, 0.0, 5.0]])
        assert greedy_decode(x) == (1, 2)

    def test_symbols(self):
        vocab = GlossVocabulary(["HELLO", "WORLD"])
        assert greedy_decode(frame_matrix([1, 0, 2, 2], 3), vocab) == ("HELLO", "WORLD")

    @settings(max_examples=80, deadline=None)
    @given(st.integers(0, 2 ** 31))
    def test_no_blank_no_run_duplicates(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(12, 4))
        out = greedy_decode(x)
        assert 0 not in out
        path = np.argmax(x, axis=-1)
        runs = [k for i, k in enumerate(path) if k != 0 and (i == 0 or path[i - 1] != k)]
        assert list(out) == runs


def exhaustive_best(x, alpha):
    """Score every label sequence via path enumeration; same ranking key as the decoder."""
    T, C = x.shape
    p = softmax(x)
    prob = defaultdict(float)
    for path in itertools.product(range(C), repeat=T):
        prob[collapse(path)] += float(np.prod(p[np.arange(T), path]))
    scored = [(y, math.log(v) / ((5 + len(y)) / 6) ** alpha) for y, v in prob.items() if v > 0]
    return min(scored, key=lambda it: (-it[1], len(it[0]), it[0]))[0]


class TestBeam:
    def test_beam_one_is_greedy(self):
        rng = np.random.default_rng(1)
        for _ in range(500):
            x = rng.normal(scale=2.0, size=(int(rng.integers(1, 15)), int(rng.integers(2, 6))))
            assert beam_decode(x, cfg=DecodeConfig(1, 0.0)) == greedy_decode(x)

    def test_beam_zero_is_greedy(self):
        x = np.random.default_rng(2).normal(size=(7, 4))
        assert beam_decode(x, cfg=DecodeConfig(0, 1.0)) == greedy_decode(x)

    @pytest.mark.parametrize("alpha", [0.0, 1.0, 2.0])
    def test_matches_exhaustive(self, alpha):
        rng = np.random.default_rng(int(alpha * 10) + 3)
        for _ in range(100 if alpha == 0.0 else 30):
            T, V = int(rng.integers(1, 7)), int(rng.integers(1, 4))
            x = rng.normal(scale=1.5, size=(T, V + 1))
            assert beam_decode(x, cfg=DecodeConfig(10, alpha)) == exhaustive_best(x, alpha)

    def test_alpha_zero_is_pure_log_prob(self):
        assert length_penalty(7, 0.0) == 1.0
        assert length_penalty(1, 1.0) == 1.0
        assert length_penalty(7, 1.0) == 2.0

    def test_prefix_merge_beats_best_path(self):
        # best single path is blank-blank (0.36) but the three "a" alignments sum to 0.64
        x = np.log(np.array([[0.6, 0.4], [0.6, 0.4]]))
        assert greedy_decode(x) == ()
        assert beam_decode(x, cfg=DecodeConfig(5, 0.0)) == (1,) == exhaustive_best(x, 0.0)

    def test_invalid_configs(self):
        with pytest.raises(ConfigError):
            DecodeConfig(11, 0.0)
        with pytest.raises(ConfigError):
            DecodeConfig(3, 2.5)
        with pytest.raises(ConfigError):
            DecodeConfig(3, 0.0, mode="lm")

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2 ** 31), st.integers(2, 10), st.sampled_from([0.0, 0.5, 1.0, 2.0]))
    def test_score_not_below_greedy(self, seed, beam, alpha):
        from signrec.ctc import _log_softmax, sequence_score
        x = np.random.default_rng(seed).normal(scale=2.0, size=(8, 4))
        lp = _log_softmax(x)
        best = beam_decode(x, cfg=DecodeConfig(beam, alpha))
        assert sequence_score(lp, best, alpha) >= sequence_score(lp, greedy_decode(x), alpha)

    def test_shift_invariance(self):
        x = np.random.default_rng(5).normal(size=(9, 4))
        shifted = x + np.random.default_rng(6).normal(size=(9, 1)) * 10
        assert beam_decode(x, cfg=DecodeConfig(5, 1.0)) == beam_decode(shifted, cfg=DecodeConfig(5, 1.0))


class TestVocabulary:
    def test_round_trip(self, tmp_path):
        v = GlossVocabulary(["A", "B", "C"])
        v.save(tmp_path / "vocab.txt")
        assert (tmp_path / "vocab.txt").read_text().splitlines()[0] == "<blank>"
        w = GlossVocabulary.load(tmp_path / "vocab.txt")
        assert w.symbols == v.symbols and w.encode(["C", "A"]) == (3, 1)

    def test_duplicates(self):
        with pytest.raises(DataError):
            GlossVocabulary(["A", "A"])

    def test_blank_in_target(self):
        with pytest.raises(DataError):
            GlossVocabulary(["A"]).encode(["<blank>"])

    def test_decode_file(self, tmp_path):
        write_decodes(tmp_path / "d.txt", [("s1", ("A", "B")), ("s2", ())])
        assert read_decodes(tmp_path / "d.txt") == {"s1": ("A", "B"), "s2": ()}
