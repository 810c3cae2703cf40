import math

import numpy as np
import pytest

from speechsmith import ngram
from speechsmith.ngram import (
    BOS,
    EOS,
    UNK,
    ArpaFormatError,
    BackoffLm,
    char_lm_scorer,
    perplexity,
    read_arpa,
    score_sentence,
    score_word,
    train_lm,
    write_arpa,
)

from helpers import witten_bell_oracle


def _toy_corpus(rng, n=150, vocab=12, max_len=5):
    words = [f"w{i}" for i in range(vocab)]
    out = []
    for _ in range(n):
        k = int(rng.integers(1, max_len + 1))
        out.append(tuple(words[int(i)] for i in rng.integers(0, vocab, size=k)))
    return out


class TestTrainLm:
    def test_worked_example_bigram(self):
        # corpus ["a b", "a c"]: lam(a) = c(a)/(c(a)+T(a)) = 2/4,
        # p_uni(b) = 1/(6+4), so p(b|a) = 0.5*0.5 + 0.5*0.1 = 0.3
        lm = train_lm([("a", "b"), ("a", "c")], order=2)
        assert 10 ** score_word(lm, ("a",), "b") == pytest.approx(0.3, abs=1e-12)

    def test_smoothing_reserves_mass(self):
        for n in (1, 5, 50):
            lm = train_lm([("a",)] * n, order=2)
            p = 10 ** score_word(lm, (BOS,), "a")
            assert p < 1.0
        p5 = 10 ** score_word(train_lm([("a",)] * 5, order=2), (BOS,), "a")
        p50 = 10 ** score_word(train_lm([("a",)] * 50, order=2), (BOS,), "a")
        assert p5 < p50 < 1.0

    def test_unigram_model_has_no_backoff(self):
        lm = train_lm([("a", "b"), ("b",)], order=1)
        assert lm.bow == {}
        assert lm.order == 1

    def test_oracle_recursion(self):
        rng = np.random.default_rng(0)
        corpus = _toy_corpus(rng, n=60, vocab=6)
        lm = train_lm(corpus, order=3)
        oracle = witten_bell_oracle(corpus, order=3)
        histories = [(), ("w0",), ("w1", "w2"), (BOS,), ("w5", "w0"), ("w3",)]
        for h in histories:
            for w in lm.vocab:
                if w == UNK:
                    continue
                assert math.exp(lm.logprob(h, w)) == pytest.approx(
                    oracle(h, w), rel=1e-10
                ), (h, w)

    def test_unseen_trigram_backs_off(self):
        corpus = [("a", "b", "c"), ("b", "c", "a"), ("a", "c", "b")]
        lm = train_lm(corpus, order=3)
        # unseen trigram (c a -> c) but seen bigram (a -> c):
        got = lm.logprob(("c", "a"), "c")
        want = lm.bow[("c", "a")] + lm.logprob(("a",), "c")
        assert got == pytest.approx(want, rel=1e-12)

    def test_empty_corpus(self):
        with pytest.raises(ValueError, match="empty"):
            train_lm([], order=2)

    def test_reserved_token_rejected(self):
        with pytest.raises(ValueError, match="reserved"):
            train_lm([("a", BOS)], order=2)

    def test_monotone_data(self):
        rng = np.random.default_rng(1)
        corpus = _toy_corpus(rng, n=40, vocab=5)
        sentence = corpus[0]
        before = score_sentence(train_lm(corpus, 3), sentence)
        after = score_sentence(train_lm(corpus + [sentence], 3), sentence)
        assert after >= before - 1e-12


class TestScoring:
    def test_normalization_sampled_histories(self):
        rng = np.random.default_rng(2)
        lm = train_lm(_toy_corpus(rng, n=200, vocab=10), order=3)
        words = [w for w in lm.vocab if w != EOS] + ["zzz-unseen"]
        for _ in range(1000):
            hlen = int(rng.integers(0, 3))
            hist = tuple(words[int(i)] for i in rng.integers(0, len(words), size=hlen))
            if hlen > 0 and rng.random() < 0.25:
                hist = (BOS,) + hist[1:]
            total = sum(math.exp(lm.logprob(hist, w)) for w in lm.vocab)
            assert total == pytest.approx(1.0, abs=1e-9), hist

    def test_empty_sentence(self):
        lm = train_lm([("a", "b"), ("b", "a")], order=2)
        assert score_sentence(lm, ()) == pytest.approx(score_word(lm, (BOS,), EOS))

    def test_closed_corpus_sentence_is_sum_of_explicit_ngrams(self):
        corpus = [("a", "b"), ("a", "b"), ("b", "a"), ("a", "b", "a")]
        lm = train_lm(corpus, order=3)
        sent = ("a", "b")
        explicit = (
            lm.logp[(BOS, "a")] + lm.logp[(BOS, "a", "b")] + lm.logp[("a", "b", EOS)]
        )
        assert score_sentence(lm, sent) * math.log(10) == pytest.approx(explicit, rel=1e-12)

    def test_oov_word_finite(self):
        lm = train_lm([("a", "b")], order=2)
        assert math.isfinite(score_sentence(lm, ("never", "seen")))
        assert 10 ** score_word(lm, (), UNK) > 0

    def test_score_word_is_log10(self):
        lm = train_lm([("a", "b"), ("a", "c")], order=2)
        assert score_word(lm, ("a",), "b") == pytest.approx(math.log10(0.3))


class TestPerplexity:
    def test_uniform(self):
        v = 5
        tokens = ("a", "b", "c", EOS, UNK)
        lm = BackoffLm(order=1, vocab=tokens,
                       logp={(t,): math.log(1 / v) for t in tokens}, bow={})
        assert perplexity(lm, [("a", "b"), ("c",)]) == pytest.approx(v, abs=1e-6)

    def test_train_below_heldout(self):
        rng = np.random.default_rng(3)
        corpus = _toy_corpus(rng, n=400, vocab=8)
        train, heldout = corpus[:300], corpus[300:]
        lm = train_lm(train, order=3)
        assert perplexity(lm, train) <= perplexity(lm, heldout)

    def test_empty_corpus(self):
        lm = train_lm([("a",)], order=1)
        with pytest.raises(ValueError):
            perplexity(lm, [])


class TestArpa:
    def test_roundtrip_scores(self, tmp_path):
        rng = np.random.default_rng(4)
        lm = train_lm(_toy_corpus(rng, n=80, vocab=7), order=3)
        path = tmp_path / "toy.arpa"
        write_arpa(lm, path)
        lm2 = read_arpa(path)
        assert lm2.order == lm.order
        for ng in lm.logp:
            assert lm2.logp[ng] / math.log(10) == pytest.approx(
                lm.logp[ng] / math.log(10), abs=1e-6
            )
        for h in lm.bow:
            assert lm2.bow[h] / math.log(10) == pytest.approx(
                lm.bow[h] / math.log(10), abs=1e-6
            )

    def test_layout(self, tmp_path):
        lm = train_lm([("a", "b")], order=2)
        path = tmp_path / "toy.arpa"
        write_arpa(lm, path)
        text = path.read_text()
        assert text.startswith("\\data\\\n")
        assert "\\1-grams:" in text and "\\2-grams:" in text
        assert text.rstrip().endswith("\\end\\")

    def test_missing_end_marker(self, tmp_path):
        lm = train_lm([("a", "b")], order=2)
        path = tmp_path / "toy.arpa"
        write_arpa(lm, path)
        path.write_text(path.read_text().replace("\\end\\", ""))
        with pytest.raises(ArpaFormatError, match="end"):
            read_arpa(path)

    def test_six_decimal_storage(self, tmp_path):
        lm = train_lm([("a", "b"), ("b", "a")], order=2)
        path = tmp_path / "toy.arpa"
        write_arpa(lm, path)
        for line in path.read_text().splitlines():
            parts = line.split("\t")
            if len(parts) >= 2:
                mantissa = parts[0].split(".")[1]
                assert len(mantissa) == 6


class TestFusionScorer:
    def _char_lm(self):
        corpus = [tuple(s) for s in ("abc", "cab", "bca", "abab", "aab", "bbc", "ac")]
        return train_lm(corpus, order=3), ("a", "b", "c")

    def test_telescoping_matches_score_sentence(self):
        lm, inv = self._char_lm()
        scorer = char_lm_scorer(lm, inv)
        state = scorer.start()
        total = 0.0
        for ch in "abca":
            state, inc = scorer.extend(state, inv.index(ch) + 1)
            total += inc
        total += scorer.finish(state)
        assert total == pytest.approx(score_sentence(lm, tuple("abca")) * math.log(10))

    def test_uniform_constant_increment(self):
        v = 4
        tokens = ("a", "b", "c", EOS, UNK)
        lm = BackoffLm(order=1, vocab=tokens,
                       logp={(t,): math.log(1 / 5) for t in tokens}, bow={})
        scorer = char_lm_scorer(lm, ("a", "b", "c"))
        state = scorer.start()
        incs = []
        for lab in (1, 2, 3, 1):
            state, inc = scorer.extend(state, lab)
            incs.append(inc)
        assert all(i == pytest.approx(math.log(1 / 5)) for i in incs)

    def test_extension_mass_bounded(self):
        lm, inv = self._char_lm()
        scorer = char_lm_scorer(lm, inv)
        states = [scorer.start()]
        for lab in (1, 3, 2):
            states.append(scorer.extend(states[-1], lab)[0])
        for state in states:
            mass = sum(
                math.exp(scorer.extend(state, lab)[1]) for lab in range(1, len(inv) + 1)
            )
            assert mass <= 1.0 + 1e-9

    def test_oracle_on_three_char_strings(self):
        lm, inv = self._char_lm()
        scorer = char_lm_scorer(lm, inv)
        import itertools

        for chars in itertools.product(inv, repeat=3):
            state = scorer.start()
            total = 0.0
            for ch in chars:
                state, inc = scorer.extend(state, inv.index(ch) + 1)
                total += inc
            total += scorer.finish(state)
            assert total == pytest.approx(
                score_sentence(lm, chars) * math.log(10), rel=1e-12
            )
