import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from signrec.ctc import DecodeConfig, decode
from signrec.errors import ConfigError, DataError
from signrec.evaluation import (
    ALPHA_GRID, BEAM_GRID, ErrorBreakdown, EvalItem, align_sequences, corpus_wer, evaluate_run, format_table,
)


def levenshtein(a, b):
    """Textbook quadratic edit distance, independent of the attributed aligner."""
    d = np.zeros((len(a) + 1, len(b) + 1), dtype=int)
    d[:, 0] = np.arange(len(a) + 1)
    d[0, :] = np.arange(len(b) + 1)
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            d[i, j] = min(d[i - 1, j] + 1, d[i, j - 1] + 1, d[i - 1, j - 1] + (a[i - 1] != b[j - 1]))
    return int(d[-1, -1])


seqs = st.lists(st.integers(0, 4), max_size=9)


class TestAlign:
    def test_identical(self):
        b = align_sequences("a b c".split(), "a b c".split())
        assert (b.substitutions, b.deletions, b.insertions, b.wer) == (0, 0, 0, 0.0)

    def test_worked_example(self):
        b = align_sequences("a b c d".split(), "a x c".split())
        assert (b.substitutions, b.deletions, b.insertions) == (1, 1, 0)
        assert b.wer == 50.0

    def test_all_deleted(self):
        b = align_sequences(list("abcde"), [])
        assert b.deletions == 5 and b.wer == 100.0

    def test_prefers_substitution(self):
        b = align_sequences(["a"], ["b"])
        assert (b.substitutions, b.deletions, b.insertions) == (1, 0, 0)

    def test_hypothesis_denominator(self):
        b = align_sequences("a b c d".split(), "a x c".split(), denominator="hypothesis")
        assert b.wer == pytest.approx(200.0 / 3)
        with pytest.raises(ConfigError):
            align_sequences([], [], denominator="words")

    def test_empty_reference(self):
        assert align_sequences([], []).wer == 0.0
        assert align_sequences([], ["a"]).wer == math.inf

    def test_matches_dp_oracle_1000(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            a = list(rng.integers(0, 5, size=rng.integers(0, 12)))
            b = list(rng.integers(0, 5, size=rng.integers(0, 12)))
            assert align_sequences(a, b).errors == levenshtein(a, b)

    @settings(max_examples=200, deadline=None)
    @given(seqs, seqs)
    def test_invariants(self, ref, hyp):
        b = align_sequences(ref, hyp)
        assert b.substitutions + b.deletions <= len(ref)
        assert b.insertions <= len(hyp)
        assert b.deletions - b.insertions == len(ref) - len(hyp)
        if ref:
            assert b.wer == pytest.approx(100.0 * b.errors / len(ref))

    @settings(max_examples=100, deadline=None)
    @given(seqs, seqs, st.permutations(range(5)))
    def test_relabeling_invariant(self, ref, hyp, perm):
        a = align_sequences(ref, hyp)
        b = align_sequences([perm[x] for x in ref], [perm[x] for x in hyp])
        assert (a.substitutions, a.deletions, a.insertions) == (b.substitutions, b.deletions, b.insertions)

    @given(st.lists(st.integers(0, 3), min_size=1, max_size=10))
    def test_empty_hyp_is_100(self, ref):
        assert align_sequences(ref, []).wer == 100.0


class TestCorpus:
    def test_pooled_example(self):
        assert corpus_wer([(["a", "b"], ["a", "c"]), (["d", "e"], ["d", "e"])]).wer == 25.0

    def test_identical(self):
        assert corpus_wer([(list("ab"), list("ab")), (list("c"), list("c"))]).wer == 0.0

    def test_empty(self):
        with pytest.raises(DataError):
            corpus_wer([])

    def test_sum_then_divide_oracle(self):
        rng = np.random.default_rng(1)
        pairs = [(list(rng.integers(0, 4, size=rng.integers(1, 8))), list(rng.integers(0, 4, size=rng.integers(0, 8))))
                 for _ in range(200)]
        errs = sum(levenshtein(a, b) for a, b in pairs)
        refs = sum(len(a) for a, _ in pairs)
        assert abs(corpus_wer(pairs).wer - 100.0 * errs / refs) < 1e-12

    def test_concatenation_pools(self):
        rng = np.random.default_rng(2)
        pairs = [(list(rng.integers(0, 3, size=4)), list(rng.integers(0, 3, size=3))) for _ in range(20)]
        whole = corpus_wer(pairs)
        halves = corpus_wer(pairs[:7]) + corpus_wer(pairs[7:])
        assert whole == halves

    def test_mixed_denominators_refused(self):
        with pytest.raises(ConfigError):
            ErrorBreakdown(denominator="reference") + ErrorBreakdown(denominator="hypothesis")


class TestReport:
    def test_table_two_decimals(self):
        text = format_table([("dev", align_sequences(list("abc"), list("ab")))])
        assert "33.33" in text and "dev" in text

    def items(self, seed, n=6, T=8, V=3):
        rng = np.random.default_rng(seed)
        out = []
        for i in range(n):
            x = rng.normal(scale=2.0, size=(T, V + 1))
            lp = x - np.logaddexp.reduce(x, axis=-1, keepdims=True)
            out.append(EvalItem(f"s{i}", tuple(rng.integers(1, V + 1, size=rng.integers(1, 4))), lp))
        return out

    def test_grid_selects_dev_best(self):
        dev, test = self.items(0), self.items(1)
        rep = evaluate_run(dev, test)
        assert len(rep.grid) == len(ALPHA_GRID) * len(BEAM_GRID)
        best = min(g["dev_wer"] for g in rep.grid)
        assert rep.split("dev").breakdown.wer == pytest.approx(best, abs=0.005)
        cfg = DecodeConfig(rep.beam, rep.alpha)
        expect = corpus_wer([(it.reference, decode(it.log_probs, cfg)) for it in test])
        assert rep.split("test").breakdown == expect

    def test_dev_and_test_reported_separately(self):
        rep = evaluate_run(self.items(2), self.items(3), alphas=[0.0], beams=[1])
        assert [s.name for s in rep.splits] == ["dev", "test"]
        recs = rep.records()
        assert {r["split"] for r in recs if r["kind"] == "split"} == {"dev", "test"}
        for r in recs:
            if r["kind"] == "split":
                assert r["S"] + r["D"] + r["I"] == round(r["wer"] * r["ref_len"] / 100)
        assert "sub" in rep.table() and "del" in rep.table() and "ins" in rep.table()

    def test_greedy_setting_matches_greedy(self):
        dev = self.items(4)
        rep = evaluate_run(dev, alphas=[0.0], beams=[1])
        assert rep.split("dev").hypotheses == {it.id: tuple(decode(it.log_probs, DecodeConfig(1, 0.0))) for it in dev}

    def test_empty_dev(self):
        with pytest.raises(DataError):
            evaluate_run([])
