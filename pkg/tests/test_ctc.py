import itertools
import math

import numpy as np
import pytest

from speechsmith import ctc
from speechsmith.ctc import (
    BLANK,
    Hypothesis,
    InfeasibleTarget,
    PosteriorGrid,
    collapse,
    ctc_grad,
    ctc_loss,
    greedy_decode,
    grid_tokens,
    min_frames,
    prefix_beam_search,
)

from helpers import brute_ctc_best_labels, brute_ctc_logprob, collapse_oracle


def _random_grid(rng, t, v):
    logits = rng.normal(size=(t, v))
    return logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))


class TestCollapse:
    def test_repeat_then_blank(self):
        # tokens: 0=blank, 1=a, 2=b
        assert collapse([1, 0, 1, 1, 0, 2]) == (1, 1, 2)

    def test_all_blank(self):
        assert collapse([0, 0, 0]) == ()

    def test_adjacent_repeats_merge(self):
        assert collapse([1, 1, 2, 2]) == (1, 2)

    def test_idempotent_on_blank_free(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            path = tuple(int(x) for x in rng.integers(0, 3, size=int(rng.integers(0, 8))))
            once = collapse(path)
            assert collapse(once) == once

    def test_matches_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(300):
            path = tuple(int(x) for x in rng.integers(0, 4, size=int(rng.integers(0, 7))))
            assert collapse(path) == collapse_oracle(path)


class TestPosteriorGrid:
    def test_normalization_enforced(self):
        with pytest.raises(ValueError, match="normalized"):
            PosteriorGrid(np.zeros((2, 2)), (BLANK, "a"))

    def test_blank_first_enforced(self):
        logp = np.log(np.full((1, 2), 0.5))
        with pytest.raises(ValueError, match="blank"):
            PosteriorGrid(logp, ("a", BLANK))

    def test_grid_tokens(self):
        assert grid_tokens(("a", "b")) == (BLANK, "a", "b")


class TestCtcLoss:
    def test_single_frame_closed_form(self):
        logp = np.log(np.array([[0.4, 0.6]]))
        assert ctc_loss(logp, (1,)) == pytest.approx(-math.log(0.6), abs=1e-12)
        assert ctc_loss(logp, (1,)) == pytest.approx(0.5108, abs=1e-4)

    def test_two_frame_uniform(self):
        # alignments {aa, a-, -a} of 4 paths: probability 0.75
        logp = np.log(np.full((2, 2), 0.5))
        assert ctc_loss(logp, (1,)) == pytest.approx(-math.log(0.75), abs=1e-12)
        assert ctc_loss(logp, (1,)) == pytest.approx(0.28768, abs=1e-5)

    def test_repeat_needs_blank_gap(self):
        logp = np.log(np.full((2, 2), 0.5))
        assert math.isinf(ctc_loss(logp, (1, 1)))
        assert min_frames((1, 1)) == 3

    def test_brute_force_equivalence(self):
        rng = np.random.default_rng(2)
        checked = 0
        for _ in range(60):
            t = int(rng.integers(1, 7))
            v = int(rng.integers(2, 4))
            logp = _random_grid(rng, t, v)
            tlen = int(rng.integers(0, 4))
            target = tuple(int(x) for x in rng.integers(1, v, size=tlen))
            got = ctc_loss(logp, target)
            want = -brute_ctc_logprob(logp, target)
            if math.isinf(want):
                assert math.isinf(got)
            else:
                assert math.exp(-got) == pytest.approx(math.exp(-want), rel=1e-10)
            checked += 1
        assert checked == 60

    def test_blank_in_target_rejected(self):
        logp = np.log(np.full((2, 2), 0.5))
        with pytest.raises(ValueError, match="blank"):
            ctc_loss(logp, (0,))

    def test_empty_target_all_blank(self):
        logp = np.log(np.array([[0.7, 0.3], [0.6, 0.4]]))
        assert ctc_loss(logp, ()) == pytest.approx(-math.log(0.7 * 0.6))

    def test_accepts_grid_object(self):
        logp = np.log(np.full((2, 2), 0.5))
        grid = PosteriorGrid(logp, (BLANK, "a"))
        assert ctc_loss(grid, (1,)) == ctc_loss(logp, (1,))


class TestCtcGrad:
    def test_single_frame_softmax_minus_onehot(self):
        logits = np.array([[0.3, -0.2, 1.1]])
        grad = ctc_grad(logits, (2,))
        softmax = np.exp(logits - np.log(np.exp(logits).sum()))
        want = softmax.copy()
        want[0, 2] -= 1.0
        assert np.allclose(grad, want, atol=1e-12)

    def test_finite_differences(self):
        rng = np.random.default_rng(3)
        eps = 1e-6
        for trial in range(20):
            t = int(rng.integers(2, 6))
            v = int(rng.integers(2, 4))
            logits = rng.normal(size=(t, v))
            tlen = int(rng.integers(1, 3))
            target = tuple(int(x) for x in rng.integers(1, v, size=tlen))
            if min_frames(target) > t:
                continue
            grad = ctc_grad(logits, target)
            for _ in range(4):
                i, k = int(rng.integers(t)), int(rng.integers(v))
                up, dn = logits.copy(), logits.copy()
                up[i, k] += eps
                dn[i, k] -= eps
                fd = (ctc_loss(up, target) - ctc_loss(dn, target)) / (2 * eps)
                assert grad[i, k] == pytest.approx(fd, rel=1e-4, abs=1e-8)

    def test_infeasible_raises(self):
        logp = np.log(np.full((2, 2), 0.5))
        with pytest.raises(InfeasibleTarget):
            ctc_grad(logp, (1, 1))


class TestGreedyDecode:
    def test_one_hot_spelling(self):
        logp = np.full((3, 3), -30.0)
        for t, k in enumerate((1, 0, 2)):
            logp[t, k] = 0.0
        assert greedy_decode(logp) == (1, 2)

    def test_all_blank(self):
        logp = np.log(np.tile(np.array([[0.8, 0.1, 0.1]]), (4, 1)))
        assert greedy_decode(logp) == ()

    def test_tie_prefers_lowest_id(self):
        logp = np.log(np.full((1, 3), 1 / 3))
        assert greedy_decode(logp) == ()  # blank is id 0, wins the tie
        logp2 = np.log(np.array([[0.2, 0.4, 0.4]]))
        assert greedy_decode(logp2) == (1,)


class TestPrefixBeamSearch:
    def test_unambiguous_matches_greedy(self):
        logp = np.full((4, 3), -30.0)
        for t, k in enumerate((1, 1, 0, 2)):
            logp[t, k] = 0.0
        grid = PosteriorGrid(logp - np.logaddexp.reduce(logp, axis=1, keepdims=True),
                             grid_tokens(("a", "b")))
        hyps = prefix_beam_search(grid, beam_size=4)
        assert hyps[0].labels == greedy_decode(grid)

    def test_exhaustive_exactness_at_saturated_beam(self):
        rng = np.random.default_rng(4)
        for trial in range(15):
            logp = _random_grid(rng, 4, 3)
            want_labels, want_lp = brute_ctc_best_labels(logp)
            hyps = prefix_beam_search(logp, beam_size=200, alpha=0.0, beta=0.0)
            assert hyps[0].labels == want_labels
            assert hyps[0].log_p_total == pytest.approx(want_lp, abs=1e-9)

    def test_monotone_in_beam_size(self):
        rng = np.random.default_rng(5)
        logp = _random_grid(rng, 5, 3)
        scores = []
        for beam in (1, 2, 4, 8, 50, 200):
            hyps = prefix_beam_search(logp, beam_size=beam)
            scores.append(hyps[0].log_p_total)
        assert all(b >= a - 1e-12 for a, b in zip(scores, scores[1:]))

    def test_empty_grid(self):
        hyps = prefix_beam_search(np.zeros((0, 3)), beam_size=4)
        assert hyps[0].labels == ()

    def test_fusion_flips_acoustic_tie(self):
        # two-frame grid with a/b equally likely in both frames: the CTC
        # score of "ab" and "ba" is identical; a char model trained heavily
        # on "ab" must break the tie once alpha > 0.
        from speechsmith import ngram

        logp = np.log(np.array([[1e-8, 0.5 - 5e-9, 0.5 - 5e-9]] * 2))
        logp = logp - np.logaddexp.reduce(logp, axis=1, keepdims=True)
        char_lm = ngram.train_lm([tuple("ab")] * 50 + [tuple("ba")], order=2)
        scorer = ngram.char_lm_scorer(char_lm, ("a", "b"))

        neutral = prefix_beam_search(logp, beam_size=50, scorer=scorer, alpha=0.0)
        fused = prefix_beam_search(logp, beam_size=50, scorer=scorer, alpha=2.0)
        assert fused[0].labels == (1, 2)  # "ab"
        top2 = {h.labels for h in neutral[:2]}
        assert top2 == {(1, 2), (2, 1)}

    def test_length_bonus_prefers_longer(self):
        rng = np.random.default_rng(6)
        logp = _random_grid(rng, 4, 3)
        short = prefix_beam_search(logp, beam_size=100, beta=0.0)[0]
        long_ = prefix_beam_search(logp, beam_size=100, beta=5.0)[0]
        assert len(long_.labels) >= len(short.labels)
