import math
import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from ehrqa.core import EhrqaError
from ehrqa.metrics import (
    _sari_op_scores,
    bleu,
    leaderboard_mean,
    link_prf,
    macro_prf,
    micro_prf,
    ngrams,
    rouge_lsum,
    rouge_n,
    sari,
)


def brute_force_prf(pairs):
    """Independent oracle: recount TP/FP/FN element by element."""
    tp = fp = fn = 0
    for pred, gold in pairs:
        pred, gold = set(pred), set(gold)
        for item in pred:
            if item in gold:
                tp += 1
            else:
                fp += 1
        for item in gold:
            if item not in pred:
                fn += 1
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f1


class TestMicroPrf:
    def test_perfect(self):
        prf = micro_prf([({1, 2}, {1, 2})])
        assert (prf.precision, prf.recall, prf.f1) == (1.0, 1.0, 1.0)

    def test_overprediction(self):
        prf = micro_prf([({"2", "5", "9"}, {"2", "5"})])
        assert prf.precision == pytest.approx(0.6667, abs=1e-4)
        assert prf.recall == 1.0
        assert prf.f1 == pytest.approx(0.8, abs=1e-9)

    def test_pooled_counts(self):
        prf = micro_prf([(set(), {1}), ({1}, {1})])
        assert prf.precision == 1.0
        assert prf.recall == 0.5
        assert prf.f1 == pytest.approx(0.6667, abs=1e-4)

    def test_matches_bruteforce_on_random_fixtures(self):
        rng = random.Random(13)
        for _ in range(200):
            pairs = [
                (
                    {rng.randint(1, 12) for _ in range(rng.randint(0, 6))},
                    {rng.randint(1, 12) for _ in range(rng.randint(0, 6))},
                )
                for _ in range(rng.randint(1, 8))
            ]
            prf = micro_prf(pairs)
            assert (prf.precision, prf.recall, prf.f1) == brute_force_prf(pairs)


class TestMacroPrf:
    def test_mean_of_cases(self):
        prf = macro_prf([({1}, {1}), (set(), {2})])
        assert (prf.precision, prf.recall, prf.f1) == (0.5, 0.5, 0.5)

    def test_empty_vs_empty_is_perfect(self):
        prf = macro_prf([(set(), set())])
        assert (prf.precision, prf.recall, prf.f1) == (1.0, 1.0, 1.0)

    def test_empty_both_convention_switchable(self):
        prf = macro_prf([(set(), set())], empty_both_score=0.0)
        assert prf.f1 == 0.0

    def test_single_nonempty_case_equals_micro(self):
        pair = [({1, 2, 3}, {2, 3, 4})]
        assert macro_prf(pair) == micro_prf(pair)


class TestLinkPrf:
    def test_perfect(self):
        pred = [("1", {"3", "7"})]
        gold = [("1", {"3", "7"})]
        assert link_prf([(pred, gold)]).f1 == 1.0

    def test_partial_recall(self):
        prf = link_prf([([("1", {"3"})], [("1", {"3", "7"})])])
        assert prf.precision == 1.0
        assert prf.recall == 0.5
        assert prf.f1 == pytest.approx(0.6667, abs=1e-4)

    def test_disjoint(self):
        prf = link_prf([([("1", {"9"})], [("1", {"3"})])])
        assert (prf.precision, prf.recall, prf.f1) == (0.0, 0.0, 0.0)

    def test_unknown_answer_id_counts_as_fp(self):
        prf = link_prf([([("1", {"3"}), ("4", {"3"})], [("1", {"3"})])])
        assert prf.precision == 0.5
        assert prf.recall == 1.0

    def test_macro_mode(self):
        pairs = [
            ([("1", {"3"})], [("1", {"3"})]),
            ([("1", set())], [("1", {"2"})]),
        ]
        prf = link_prf(pairs, mode="macro")
        assert prf.f1 == 0.5


class TestRouge:
    def test_identical(self):
        assert rouge_n("same text here", "same text here", 1) == 1.0
        assert rouge_n("same text here", "same text here", 2) == 1.0

    def test_unigram_example(self):
        assert rouge_n("a b c", "a b d", 1) == pytest.approx(0.6667, abs=1e-4)

    def test_no_overlap(self):
        assert rouge_n("a b", "x y", 1) == 0.0

    def test_clipping(self):
        # candidate repeats a token that appears once in the reference
        score = rouge_n("a a a", "a b c", 1)
        # clipped matches = 1; P=1/3, R=1/3
        assert score == pytest.approx(1 / 3, abs=1e-9)

    def test_lsum_identical(self):
        assert rouge_lsum("The stent was placed.", "The stent was placed.") == 1.0

    def test_lsum_hand_lcs(self):
        assert rouge_lsum("the cat sat", "the dog sat") == pytest.approx(0.6667, abs=1e-4)

    def test_lsum_empty_candidate(self):
        assert rouge_lsum("", "something here") == 0.0

    def test_lsum_multi_sentence(self):
        # two sentences, each fully matched: union LCS covers everything
        text = "The stent was placed. Recovery was good."
        assert rouge_lsum(text, text) == 1.0


class TestBleu:
    def test_identical_ten_tokens(self):
        text = "one two three four five six seven eight nine ten"
        assert bleu(text, text) == 1.0

    def test_brevity_penalty_half_length(self):
        ref = "one two three four five six seven eight nine ten"
        cand = "one two three four five"
        # all clipped precisions are 1, so BLEU = BP = exp(1 - 10/5)
        assert bleu(cand, ref) == pytest.approx(math.exp(-1.0), abs=1e-9)

    def test_disjoint_near_zero(self):
        cand = " ".join(f"a{i}" for i in range(10))
        ref = " ".join(f"b{i}" for i in range(10))
        score = bleu(cand, ref)
        # add-one smoothing floors each precision at 1/(count+1)
        assert 0.0 < score < 0.15

    def test_empty_candidate(self):
        assert bleu("", "a b c") == 0.0


class TestSari:
    def test_identity_triple_is_perfect(self):
        assert sari("a b c", "a b c", "a b c") == pytest.approx(100.0, abs=1e-9)

    def test_wrong_deletion_has_zero_delete_precision(self):
        # candidate deletes a word the reference keeps
        src = ngrams("a b c".split(), 1)
        cand = ngrams("a b".split(), 1)
        ref = ngrams("a b c".split(), 1)
        _, _, del_p = _sari_op_scores(src, cand, ref)
        assert del_p == 0.0

    def test_empty_candidate_zero_keep_and_add(self):
        src = ngrams("the cat sat".split(), 1)
        cand = ngrams([], 1)
        ref = ngrams("the cat slept".split(), 1)
        keep_f1, add_f1, _ = _sari_op_scores(src, cand, ref)
        assert keep_f1 == 0.0
        assert add_f1 == 0.0

    def test_good_simplification_beats_noop(self):
        source = "the procedure was performed emergently on the patient yesterday morning"
        reference = "the procedure was performed emergently"
        good = "the procedure was performed emergently"
        noop = source
        assert sari(source, good, reference) > sari(source, noop, reference)

    def test_range(self):
        value = sari("a b c d", "a c e", "a b d")
        assert 0.0 <= value <= 100.0


class TestLeaderboardMean:
    def test_hand_mean(self):
        assert leaderboard_mean([46.35, 29.28, 44.57, 54.58]) == pytest.approx(43.695)

    def test_single_value(self):
        assert leaderboard_mean([12.5]) == 12.5

    def test_equal_values(self):
        assert leaderboard_mean([7.0, 7.0, 7.0]) == 7.0

    def test_empty_is_error(self):
        with pytest.raises(EhrqaError):
            leaderboard_mean([])


@given(st.text(alphabet="abcd ?", max_size=40))
def test_identical_pair_scores_maximum(text):
    # symmetric-safe: identical candidate/reference pairs hit the metric maximum
    if text.split():
        assert rouge_n(text, text, 1) == 1.0
        assert rouge_lsum(text, text) == 1.0
        assert bleu(text, text) == 1.0
        assert sari(text, text, text) == pytest.approx(100.0)
