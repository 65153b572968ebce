import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uasr.errors import ContractError
from uasr.evalkit import beam_decode, edit_distance, greedy_decode, per
from uasr.textproc import SIL, UnitInventory, train_ngram

INV = UnitInventory([SIL, "a", "b", "c"])
RNG = np.random.default_rng(21)


def scores_for(units):
    out = np.zeros((len(units), len(INV)))
    out[np.arange(len(units)), units] = 4.0
    out += RNG.normal(size=out.shape) * 0.1
    return out


def dp_distance_oracle(ref, hyp):
    """Plain Levenshtein distance, no count tracking."""
    n, m = len(ref), len(hyp)
    d = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        d[i][0] = i
    for j in range(m + 1):
        d[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d[i][j] = min(
                d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]),
                d[i - 1][j] + 1,
                d[i][j - 1] + 1,
            )
    return d[n][m]


class TestGreedyDecode:
    def test_collapse_and_strip(self):
        a, b, sil = INV.id("a"), INV.id("b"), INV.sil_id
        out = greedy_decode(scores_for([a, a, sil, b, b]), INV, strip_silence=True)
        assert out.tolist() == [a, b]

    def test_empty_input(self):
        out = greedy_decode(np.zeros((0, len(INV))), INV)
        assert out.tolist() == []

    def test_matches_straight_line_reference(self):
        frames = RNG.normal(size=(30, len(INV)))
        out = greedy_decode(frames, INV, strip_silence=True)
        # reference decoder: loop, compare, append
        ref = []
        prev = None
        for t in range(30):
            best = 0
            for v in range(len(INV)):
                if frames[t, v] > frames[t, best]:
                    best = v
            if best != prev:
                if best != INV.sil_id:
                    ref.append(best)
                prev = best
        assert out.tolist() == ref

    def test_wrong_width_rejected(self):
        with pytest.raises(ContractError):
            greedy_decode(np.zeros((5, 3)), INV)


class TestEditDistance:
    def test_identity(self):
        c = edit_distance([1, 2, 3], [1, 2, 3])
        assert (c.substitutions, c.deletions, c.insertions) == (0, 0, 0)

    def test_single_deletion(self):
        c = edit_distance([1, 2, 3], [1, 3])
        assert (c.substitutions, c.deletions, c.insertions) == (0, 1, 0)

    def test_prefers_substitution(self):
        c = edit_distance([1, 2], [2, 1])
        assert c.substitutions == 2 and c.deletions == 0 and c.insertions == 0

    def test_total_matches_brute_force_oracle(self):
        rng = np.random.default_rng(6)
        for _ in range(1000):
            ref = rng.integers(0, 5, size=rng.integers(0, 13)).tolist()
            hyp = rng.integers(0, 5, size=rng.integers(0, 13)).tolist()
            assert edit_distance(ref, hyp).total == dp_distance_oracle(ref, hyp)

    @given(st.lists(st.integers(0, 4), max_size=10), st.lists(st.integers(0, 4), max_size=10))
    @settings(max_examples=100, deadline=None)
    def test_symmetry(self, a, b):
        ab = edit_distance(a, b)
        ba = edit_distance(b, a)
        assert ab.total == ba.total
        assert ab.substitutions == ba.substitutions
        assert ab.deletions == ba.insertions
        assert ab.insertions == ba.deletions

    @given(st.lists(st.integers(0, 3), max_size=8), st.lists(st.integers(0, 3), max_size=8),
           st.lists(st.integers(0, 3), max_size=8))
    @settings(max_examples=60, deadline=None)
    def test_triangle_inequality(self, a, b, c):
        assert edit_distance(a, c).total <= edit_distance(a, b).total + edit_distance(b, c).total


class TestPer:
    def test_exact_match_zero(self):
        refs = [[1, 2], [3]]
        assert per(refs, refs)["per"] == 0.0

    def test_all_empty_hyps(self):
        refs = [[1, 2], [3, 4, 5]]
        result = per(refs, [[], []])
        assert result["per"] == 1.0 and result["del"] == 5

    def test_matches_per_utterance_sums(self):
        rng = np.random.default_rng(9)
        refs = [rng.integers(0, 4, size=rng.integers(1, 10)).tolist() for _ in range(10)]
        hyps = [rng.integers(0, 4, size=rng.integers(0, 10)).tolist() for _ in range(10)]
        result = per(refs, hyps)
        s = d = i = n = 0
        for r, h in zip(refs, hyps):
            c = edit_distance(r, h)
            s += c.substitutions; d += c.deletions; i += c.insertions; n += len(r)
        assert abs(result["per"] - (s + d + i) / n) <= 1e-12

    def test_duplication_invariance(self):
        rng = np.random.default_rng(10)
        refs = [rng.integers(0, 4, size=5).tolist() for _ in range(4)]
        hyps = [rng.integers(0, 4, size=6).tolist() for _ in range(4)]
        assert per(refs, hyps)["per"] == per(refs * 2, hyps * 2)["per"]

    def test_length_mismatch(self):
        with pytest.raises(ContractError):
            per([[1]], [[1], [2]])


class TestBeamDecode:
    def test_reduces_to_greedy_with_zero_lm_weight_on_clear_input(self):
        a, b = INV.id("a"), INV.id("b")
        frames = scores_for([a, a, b, b])
        lm = train_ngram([np.array([a, b])] * 3, order=2, alpha=0.5, vocab_size=len(INV))
        out = beam_decode(frames, INV, lm, beam_width=4, lm_weight=0.0)
        assert out.tolist() == greedy_decode(frames, INV).tolist()

    def test_lm_breaks_near_ties(self):
        a, b = INV.id("a"), INV.id("b")
        frames = np.zeros((3, len(INV)))  # acoustically uninformative
        lm = train_ngram([np.array([a, a, b])] * 50, order=2, alpha=0.01,
                         vocab_size=len(INV))
        out = beam_decode(frames, INV, lm, beam_width=6, lm_weight=2.0)
        assert out.tolist()[:1] == [a]
